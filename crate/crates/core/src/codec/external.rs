use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::{Codec, ColorSpace, EncodeResult, QualityRange};
use crate::image::Image;
use crate::{Error, Result};

/// Per-invocation timeout in seconds for external codec binaries.
pub const TIMEOUT_ENV: &str = "PREFILTER_CODEC_TIMEOUT";
/// Directory for the per-call scratch files of external codecs.
pub const TMPDIR_ENV: &str = "PREFILTER_TMPDIR";
const DEFAULT_TIMEOUT_SECS: u64 = 300;

/// Declarative description of an external codec. Command templates are
/// split on whitespace (no shell) and may use `{input}`, `{output}` and
/// `{quality}`. The encoder receives a PNG; the decoder must write a PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub name: String,
    pub encode: String,
    pub decode: String,
    pub extension: String,
    pub colorspace: ColorSpace,
    pub quality: QualityRange,
}

impl AdapterSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: AdapterSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.quality.validate()?;
        if self.name.trim().is_empty() {
            return Err(Error::Config("adapter name is empty".into()));
        }
        for (what, t) in [("encode", &self.encode), ("decode", &self.decode)] {
            if !(t.contains("{input}") && t.contains("{output}")) {
                return Err(Error::Config(format!("{} {what} template needs {{input}} and {{output}}", self.name)));
            }
        }
        if !self.encode.contains("{quality}") {
            return Err(Error::Config(format!("{} encode template needs {{quality}}", self.name)));
        }
        Ok(())
    }
}

pub struct ExternalCodec {
    spec: AdapterSpec,
    timeout: Duration,
}

fn find_binary(program: &str) -> Option<PathBuf> {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return p.is_file().then(|| p.to_path_buf());
    }
    std::env::split_paths(&std::env::var_os("PATH")?).map(|d| d.join(program)).find(|c| c.is_file())
}

impl ExternalCodec {
    pub fn new(spec: AdapterSpec) -> Result<Self> {
        spec.validate()?;
        let secs = std::env::var(TIMEOUT_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_TIMEOUT_SECS);
        Ok(ExternalCodec { spec, timeout: Duration::from_secs(secs) })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn is_available(&self) -> bool {
        [&self.spec.encode, &self.spec.decode]
            .iter()
            .all(|t| t.split_whitespace().next().and_then(find_binary).is_some())
    }

    fn scratch_dir(&self) -> Result<tempfile::TempDir> {
        let builder = tempfile::Builder::new().prefix("prefilter-codec").tempdir_in(
            std::env::var_os(TMPDIR_ENV).map(PathBuf::from).unwrap_or_else(std::env::temp_dir),
        );
        builder.map_err(|e| Error::io("codec scratch directory", e))
    }

    fn run(&self, template: &str, input: &Path, output: &Path, quality: i32) -> Result<()> {
        let args: Vec<String> = template
            .split_whitespace()
            .map(|tok| {
                tok.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
                    .replace("{quality}", &quality.to_string())
            })
            .collect();
        let fail = |message: String| Error::Adapter { adapter: self.spec.name.clone(), message };
        let program = find_binary(&args[0]).ok_or_else(|| Error::AdapterUnavailable(self.spec.name.clone()))?;
        let mut child = Command::new(program)
            .args(&args[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("spawning `{}`: {e}", args[0])))?;
        let status = match child.wait_timeout(self.timeout).map_err(|e| fail(e.to_string()))? {
            Some(s) => s,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(fail(format!("`{}` timed out after {:?}", args[0], self.timeout)));
            }
        };
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut e) = child.stderr.take() {
                let _ = e.read_to_string(&mut stderr);
            }
            return Err(fail(format!("`{}` exited with {status}: {}", args.join(" "), stderr.trim())));
        }
        Ok(())
    }
}

impl Codec for ExternalCodec {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn quality_range(&self) -> QualityRange {
        self.spec.quality
    }

    fn colorspace(&self) -> ColorSpace {
        self.spec.colorspace
    }

    fn encode(&self, image: &Image, quality: i32) -> Result<Vec<u8>> {
        self.check_quality(quality)?;
        let dir = self.scratch_dir()?;
        let input = dir.path().join("input.png");
        let coded = dir.path().join(format!("coded.{}", self.spec.extension));
        image.save_png(&input)?;
        self.run(&self.spec.encode, &input, &coded, quality)?;
        std::fs::read(&coded).map_err(|e| Error::io(&coded, e))
    }

    fn decode(&self, bytes: &[u8]) -> Result<Image> {
        let dir = self.scratch_dir()?;
        let coded = dir.path().join(format!("coded.{}", self.spec.extension));
        let output = dir.path().join("decoded.png");
        std::fs::write(&coded, bytes).map_err(|e| Error::io(&coded, e))?;
        self.run(&self.spec.decode, &coded, &output, 0)?;
        Image::load(&output)
    }

    fn encode_decode(&self, image: &Image, quality: i32) -> Result<EncodeResult> {
        self.check_quality(quality)?;
        image.validate()?;
        let bytes = self.encode(image, quality)?;
        let decoded = self.decode(&bytes)?;
        if (decoded.height(), decoded.width()) != (image.height(), image.width()) {
            return Err(Error::Adapter { adapter: self.spec.name.clone(), message: "decoded size differs".into() });
        }
        Ok(EncodeResult::new(image, bytes.len(), decoded))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(encode: &str, decode: &str) -> AdapterSpec {
        AdapterSpec {
            name: "fake".into(),
            encode: encode.into(),
            decode: decode.into(),
            extension: "bin".into(),
            colorspace: ColorSpace::Rgb,
            quality: QualityRange { min: 0, max: 100, higher_is_better: true },
        }
    }

    #[test]
    fn cp_adapter_round_trips_losslessly() {
        // `cp` copies the PNG both ways, exercising the real subprocess path.
        let codec = ExternalCodec {
            spec: spec("cp {input} {output}", "cp {input} {output}"),
            timeout: Duration::from_secs(30),
        };
        let img = Image::from_fn(9, 11, |c, y, x| ((c * 40 + y * 20 + x * 9) % 256) as f64 / 255.0);
        let r = codec.encode_decode(&img, 50).unwrap();
        assert_eq!(r.decoded, img);
        assert!(r.compressed_size > 0);
    }

    #[test]
    fn missing_binary_is_unavailable() {
        let codec = ExternalCodec::new(spec("no-such-codec-binary {quality} {input} {output}", "cp {input} {output}")).unwrap();
        assert!(!codec.is_available());
        let img = Image::filled(4, 4, [0.5; 3]);
        assert!(matches!(codec.encode_decode(&img, 10), Err(Error::AdapterUnavailable(_))));
    }

    #[test]
    fn failing_binary_reports_diagnostics() {
        let codec = ExternalCodec::new(spec("false {quality} {input} {output}", "cp {input} {output}")).unwrap();
        let img = Image::filled(4, 4, [0.5; 3]);
        match codec.encode_decode(&img, 10) {
            Err(Error::Adapter { adapter, message }) => {
                assert_eq!(adapter, "fake");
                assert!(message.contains("exited"));
            }
            other => panic!("expected adapter error, got {other:?}"),
        }
    }

    #[test]
    fn templates_are_validated() {
        assert!(spec("enc {input} {output}", "dec {input} {output}").validate().is_err());
        assert!(spec("enc {quality} {input}", "dec {input} {output}").validate().is_err());
        assert!(spec("enc {quality} {input} {output}", "dec {input} {output}").validate().is_ok());
    }
}
