//! conv3d against a nested-loop oracle and the transposed-convolution
//! adjoint identity `<conv(a), b> = <a, conv_t(b)>`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsnap_acceptance::{ensure, within, Outcome};
use voxsnap_tensor::{Tape, Tensor};

const TOL: f64 = 1e-10;
const CASES: usize = 64;

fn idx5(s: &[usize], a: usize, b: usize, c: usize, d: usize, e: usize) -> usize {
    (((a * s[1] + b) * s[2] + c) * s[3] + d) * s[4] + e
}

/// Zero-padded direct summation.
fn naive_conv3d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ks) = (x.shape(), k.shape());
    let (n, c, f, kk) = (xs[0], xs[1], ks[0], ks[2]);
    let ext = |i: usize| (i + 2 * pad - kk) / stride + 1;
    let os = [n, f, ext(xs[2]), ext(xs[3]), ext(xs[4])];
    let mut out = Tensor::zeros(os.to_vec());
    let at = |o: usize, k: usize, lim: usize| {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < lim).then_some(i as usize)
    };
    for b in 0..n {
        for fo in 0..f {
            for z in 0..os[2] {
                for y in 0..os[3] {
                    for w in 0..os[4] {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..kk {
                                let Some(iz) = at(z, a, xs[2]) else { continue };
                                for bb in 0..kk {
                                    let Some(iy) = at(y, bb, xs[3]) else { continue };
                                    for cc in 0..kk {
                                        let Some(ix) = at(w, cc, xs[4]) else { continue };
                                        acc += x.data()[idx5(xs, b, ci, iz, iy, ix)]
                                            * k.data()[idx5(ks, fo, ci, a, bb, cc)];
                                    }
                                }
                            }
                        }
                        out.data_mut()[idx5(&os, b, fo, z, y, w)] = acc;
                    }
                }
            }
        }
    }
    out
}

fn run(x: &Tensor, k: &Tensor, stride: usize, pad: usize, transposed: bool) -> Tensor {
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
    let y = if transposed {
        t.conv_transpose3d(xv, kv, stride, pad)
    } else {
        t.conv3d(xv, kv, stride, pad)
    };
    t.value(y.unwrap()).clone()
}

fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

pub fn criterion() -> Outcome {
    let t = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_conv, mut worst_adj) = (0.0f64, 0.0f64);
    let mut cases = 0;
    while cases < CASES {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let f = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=k.min(2));
        let ext = rng.random_range(1..=8);
        // The adjoint needs conv_t to land back on the input lattice.
        if k > ext + 2 * pad || (ext + 2 * pad - k) % stride != 0 {
            continue;
        }
        let a = Tensor::randn([n, c, ext, ext, ext], 1.0, &mut rng);
        let kern = Tensor::randn([f, c, k, k, k], 1.0, &mut rng);
        let y = run(&a, &kern, stride, pad, false);
        let want = naive_conv3d(&a, &kern, stride, pad);
        ensure(y.shape() == want.shape(), || format!("shape {:?} vs {:?}", y.shape(), want.shape()))?;
        let e = max_rel_err(&y, &want);
        worst_conv = worst_conv.max(e);
        let shape = format!("x {:?} k {:?} stride {stride} pad {pad}", a.shape(), kern.shape());
        ensure(e < TOL, || format!("conv3d {shape}: rel err {e:e}"))?;

        let b = Tensor::randn(y.shape().to_vec(), 1.0, &mut rng);
        let back = run(&b, &kern, stride, pad, true);
        ensure(back.shape() == a.shape(), || format!("conv_t shape {:?} for {shape}", back.shape()))?;
        let (lhs, rhs) = (y.dot(&b).unwrap(), a.dot(&back).unwrap());
        let e = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
        worst_adj = worst_adj.max(e);
        ensure(e < TOL, || format!("adjoint {shape}: {lhs} vs {rhs}"))?;
        cases += 1;
    }
    within(t.elapsed(), std::time::Duration::from_secs(60))?;
    Ok(format!("{cases} shapes, worst conv3d rel err {worst_conv:.1e}, worst adjoint rel err {worst_adj:.1e}"))
}
