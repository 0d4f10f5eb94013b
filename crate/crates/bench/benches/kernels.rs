use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrseg_core::maskops::{
    bbox_embedding, iou, rasterize, rle_decode, rle_encode, BBox, EmbeddingSpec, MaskGrid,
};
use mrseg_core::relations::classify;

fn random_mask(rng: &mut ChaCha8Rng, h: u32, w: u32) -> MaskGrid {
    let bits = (0..(h * w) as usize)
        .map(|_| u8::from(rng.random_bool(0.4)))
        .collect();
    MaskGrid::from_data(h, w, bits)
}

fn random_box(rng: &mut ChaCha8Rng, extent: u32) -> BBox {
    let x1 = rng.random_range(0..extent - 1);
    let y1 = rng.random_range(0..extent - 1);
    let x2 = rng.random_range(x1 + 1..extent);
    let y2 = rng.random_range(y1 + 1..extent);
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn bench_rle(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = random_mask(&mut rng, 480, 640);
    let counts = rle_encode(&mask);
    c.bench_function("rle_encode_480x640", |b| {
        b.iter(|| black_box(rle_encode(black_box(&mask))))
    });
    c.bench_function("rle_decode_480x640", |b| {
        b.iter(|| black_box(rle_decode(black_box(&counts), 480, 640).unwrap()))
    });
}

fn bench_rasterize(c: &mut Criterion) {
    // A 32-gon spanning most of a VGA frame.
    let ring: Vec<f64> = (0..32)
        .flat_map(|i| {
            let t = i as f64 / 32.0 * std::f64::consts::TAU;
            [320.0 + 280.0 * t.cos(), 240.0 + 200.0 * t.sin()]
        })
        .collect();
    c.bench_function("rasterize_32gon_480x640", |b| {
        b.iter(|| black_box(rasterize(black_box(std::slice::from_ref(&ring)), 480, 640)))
    });
}

fn bench_iou(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_mask(&mut rng, 480, 640);
    let b_mask = random_mask(&mut rng, 480, 640);
    c.bench_function("iou_480x640", |b| {
        b.iter(|| black_box(iou(black_box(&a), black_box(&b_mask)).unwrap()))
    });
}

fn bench_classify(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<(BBox, BBox)> = (0..1024)
        .map(|_| (random_box(&mut rng, 640), random_box(&mut rng, 640)))
        .collect();
    c.bench_function("classify_1024_pairs", |b| {
        b.iter(|| {
            for (x, y) in &pairs {
                black_box(classify(black_box(x), black_box(y)).unwrap());
            }
        })
    });
}

fn bench_embedding(c: &mut Criterion) {
    let spec = EmbeddingSpec::new(4096);
    let bbox = BBox::new(12, 34, 555, 433).unwrap();
    c.bench_function("bbox_embedding_dim4096", |b| {
        b.iter(|| black_box(bbox_embedding(black_box(&bbox), 640, 480, &spec)))
    });
}

criterion_group!(
    benches,
    bench_rle,
    bench_rasterize,
    bench_iou,
    bench_classify,
    bench_embedding
);
criterion_main!(benches);
