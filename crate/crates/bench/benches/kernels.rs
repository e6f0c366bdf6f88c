use criterion::{black_box, criterion_group, criterion_main, Criterion};
use prefilter::autograd::Graph;
use prefilter::codec::{Codec, JpegCodec};
use prefilter::distortion::{ms_ssim, ms_ssim_var, MsSsimConfig};
use prefilter::filter::{Filter, FilterConfig};
use prefilter::image::Image;
use prefilter::surrogate::{QuantizationMode, Surrogate, SurrogateConfig};
use prefilter_bench::fixture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn metrics(c: &mut Criterion) {
    let a = fixture(256, 1);
    let b = JpegCodec.encode_decode(&a, 40).unwrap().decoded;
    c.bench_function("ms_ssim 256px", |bench| bench.iter(|| ms_ssim(black_box(&a), black_box(&b)).unwrap()));
    c.bench_function("ms_ssim forward+backward 96px x8", |bench| {
        let batch = Image::batch(&vec![fixture(96, 2); 8]).unwrap();
        let other = Image::batch(&vec![fixture(96, 3); 8]).unwrap();
        bench.iter(|| {
            let g = Graph::new();
            let x = g.leaf(batch.clone());
            let s = ms_ssim_var(x, g.constant(other.clone()), &MsSsimConfig::default()).unwrap().mean();
            black_box(g.backward(s));
        })
    });
    c.bench_function("jpeg q50 256px", |bench| bench.iter(|| JpegCodec.encode_decode(black_box(&a), 50).unwrap()));
}

fn networks(c: &mut Criterion) {
    let surrogate = Surrogate::new(SurrogateConfig::desk_scale(0.2), 0).unwrap();
    let filter = Filter::new(FilterConfig::desk_scale(), &surrogate, 0).unwrap();
    let img = fixture(128, 4);
    c.bench_function("surrogate estimate_bpp 128px", |bench| bench.iter(|| surrogate.estimate_bpp(black_box(&img)).unwrap()));
    c.bench_function("filter apply 128px", |bench| bench.iter(|| filter.apply(&surrogate, black_box(&img)).unwrap()));
    c.bench_function("surrogate train step 96px x8", |bench| {
        let batch = Image::batch(&vec![fixture(96, 5); 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bench.iter(|| {
            let g = Graph::new();
            let p = surrogate.bind(&g, true);
            let x = g.constant(batch.clone());
            let pass = surrogate.forward(&p, x, QuantizationMode::Noise, &mut rng, true).unwrap();
            black_box(g.backward(pass.mean_bpp()));
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = metrics, networks
}
criterion_main!(benches);
