use criterion::{criterion_group, criterion_main, Criterion};
use fairfader_bench::{desk_batch, rng, uniform};
use fairfader_core::training::{dis_step, encdec_step};
use fairfader_core::{ArchSpec, Decoder, Discriminator, Encoder, Graph};

fn conv(c: &mut Criterion) {
    let x = uniform(&[32, 16, 16, 16], 1);
    let w = uniform(&[32, 16, 4, 4], 2);
    let b = uniform(&[32], 3);
    c.bench_function("conv2d 4x4/2 16->32 @16x16 batch 32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(xv, wv, bv, 2, 1).unwrap()
        })
    });
    let z = uniform(&[32, 32, 8, 8], 4);
    let wt = uniform(&[32, 16, 4, 4], 5);
    let bt = uniform(&[16], 6);
    c.bench_function("deconv2d 4x4/2 32->16 @8x8 batch 32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (zv, wv, bv) = (g.constant(z.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
            g.deconv2d(zv, wv, bv, 2, 1).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let spec = ArchSpec::desk();
    let batch = desk_batch(32);
    let mut enc = Encoder::build(&spec, &mut rng(1)).unwrap();
    let mut dec = Decoder::build(&spec, spec.num_attrs, &mut rng(2)).unwrap();
    let mut dis = Discriminator::build(&spec, &mut rng(3)).unwrap();
    c.bench_function("fader iteration desk batch 32", |bench| {
        bench.iter(|| {
            dis_step(&enc, &mut dis, &batch.images, &batch.races, 1e-3).unwrap();
            encdec_step(&mut enc, &mut dec, Some(&dis), &batch.images, &batch.races, 1e-3, 0.1).unwrap()
        })
    });
}

criterion_group!(benches, conv, train_step);
criterion_main!(benches);
