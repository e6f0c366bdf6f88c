use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prefilter::distortion::{FilterMode, LossWeights};
use prefilter::filter::{Filter, FilterConfig};
use prefilter::image::Image;
use prefilter::surrogate::{Surrogate, SurrogateConfig};
use prefilter::synth;

const TINY: &str = r#"
checkpoint_every = 2
[data]
synthetic_count = 4
synthetic_size = 48
crop = 32
[surrogate]
latent_channels = 4
hidden_channels = 4
[surrogate_schedule]
batch_size = 2
stages = [[3, 0.001]]
"#;

fn prefilter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefilter")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_png(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let path = dir.join(name);
    synth::corpus(1, 40, 56, seed).remove(0).quantized8().save_png(&path).unwrap();
    path
}

#[test]
fn eval_rd_one_image_two_qualities() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_png(dir.path(), "a.png", 1);
    let out = dir.path().join("eval");
    let o = prefilter(&["eval-rd", "--out", s(&out), "--qualities", "20,80", "--metric", "psnr", s(&img)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("rd.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "dataset,codec,filtered,quality,bpp,metric,value");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("images,jpeg,false,20,"));
    let run = std::fs::read_to_string(out.join("run.toml")).unwrap();
    assert!(run.contains("subcommand = \"eval-rd\""));

    let again = dir.path().join("eval2");
    prefilter(&["eval-rd", "--out", s(&again), "--qualities", "20,80", "--metric", "psnr", s(&img)]);
    assert_eq!(std::fs::read(out.join("rd.csv")).unwrap(), std::fs::read(again.join("rd.csv")).unwrap());

    let rep = dir.path().join("report");
    let o = prefilter(&["report", "--out", s(&rep), s(&out.join("rd.csv"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rep.join("rd_psnr.svg").exists());
    assert!(rep.join("report.json").exists());
}

#[test]
fn usage_and_config_errors_share_the_usage_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(prefilter(&["eval-rd", "--out", s(&out), "--bogus"]).status.code(), Some(2));
    assert_eq!(prefilter(&["frobnicate"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[surrogate]\nlambda = -3.0\n").unwrap();
    let o = prefilter(&["train-surrogate", "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[config]"));
    let img = write_png(dir.path(), "a.png", 1);
    let o = prefilter(&["eval-rd", "--out", s(&out), "--qualities", "0,50", s(&img)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_codec_binary_is_an_adapter_error() {
    let dir = tempfile::tempdir().unwrap();
    let adapters = dir.path().join("adapters");
    std::fs::create_dir(&adapters).unwrap();
    std::fs::write(
        adapters.join("ghost.toml"),
        "name = \"ghost\"\nencode = \"ghost-enc-missing -q {quality} {input} {output}\"\n\
         decode = \"ghost-dec-missing {input} {output}\"\nextension = \"gh\"\ncolorspace = \"rgb\"\n\
         [quality]\nmin = 0\nmax = 10\nhigher_is_better = true\n",
    )
    .unwrap();
    let img = write_png(dir.path(), "a.png", 2);
    let out = dir.path().join("eval");
    let o = prefilter(&["eval-rd", "--out", s(&out), "--adapters", s(&adapters), "--codec", "ghost", s(&img)]);
    assert_eq!(o.status.code(), Some(6), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[adapter]"));
    let o = prefilter(&["eval-rd", "--out", s(&out), "--adapters", s(&adapters), "--qualities", "50", s(&img)]);
    assert!(o.status.success(), "jpeg still works when another adapter is skipped");
}

#[test]
fn identity_filter_reproduces_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let surrogate = Surrogate::new(SurrogateConfig { latent_channels: 4, hidden_channels: 4, ..SurrogateConfig::desk_scale(0.2) }, 0)
        .unwrap();
    let sp = dir.path().join("surrogate.json");
    surrogate.save(&sp).unwrap();
    let cfg = FilterConfig { upsample_channels: vec![8, 8, 16, 16], trunk_channels: 4, res_blocks: 1, zero_output: true, ..FilterConfig::default() };
    let filter = Filter::new(cfg, &surrogate, 0).unwrap();
    let fp = dir.path().join("filter.json");
    filter.to_checkpoint(FilterMode::MsssimRetarget, LossWeights::retarget(0.2)).save(&fp).unwrap();

    let inputs = dir.path().join("in");
    std::fs::create_dir(&inputs).unwrap();
    let a = write_png(&inputs, "a.png", 3);
    let b = write_png(&inputs, "b.png", 4);
    let before = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let out = dir.path().join("out");
    let o = prefilter(&[
        "filter-images",
        "--out",
        s(&out),
        "--filter-checkpoint",
        s(&fp),
        "--surrogate-checkpoint",
        s(&sp),
        s(&inputs),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["a.png", "b.png"] {
        assert_eq!(Image::load(&out.join(name)).unwrap(), Image::load(&inputs.join(name)).unwrap());
    }
    assert_eq!(before, (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap()));

    let other = Surrogate::new(SurrogateConfig { latent_channels: 4, hidden_channels: 4, ..SurrogateConfig::desk_scale(0.2) }, 9)
        .unwrap();
    let op = dir.path().join("other.json");
    other.save(&op).unwrap();
    let o = prefilter(&["filter-images", "--out", s(&out), "--filter-checkpoint", s(&fp), "--surrogate-checkpoint", s(&op), s(&a)]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn paper_preset_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = prefilter(&["train-filter", "--preset", "paper_scale", "--dry-run", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("config.toml")).unwrap();
    let cfg = prefilter::config::TrainConfig::from_toml_str(&text, prefilter::config::Preset::DeskScale).unwrap();
    assert_eq!(cfg.preset, prefilter::config::Preset::PaperScale);
    assert_eq!(cfg.filter_schedule.batch_size, 8);
    assert_eq!(cfg.filter_schedule.stages, vec![(400_000, 1e-4), (100_000, 1e-5)]);
}

#[test]
fn training_is_reproducible_from_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = prefilter(&["train-surrogate", "--config", s(&cfg), "--seed", "5", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(b.join("loss.csv")).unwrap());
    for f in ["config.toml", "run.toml", "surrogate.json", "checkpoints/step_0000002.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let c = dir.path().join("c");
    let o = prefilter(&["train-surrogate", "--config", s(&a.join("config.toml")), "--out", s(&c)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(c.join("loss.csv")).unwrap());
}
