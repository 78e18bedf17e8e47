//! Central finite differences against the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsnap_acceptance::{ensure, within, Outcome};
use voxsnap_core::nets::{Architecture, Discriminator, Generator, ProjectionNet};
use voxsnap_tensor::{Activation, Bound, Mode, ParamId, ParamStore, RunningStats, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;
const COORDS: usize = 40;

type Forward<'a> = dyn Fn(&mut Tape, &Bound, &[Var]) -> Var + 'a;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Contracts the output with fixed random weights so every element matters.
fn weights(t: &Tape, y: Var) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let v = t.value(y);
    Tensor::new(v.shape().to_vec(), (0..v.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn loss_value(params: &ParamStore, inputs: &[Tensor], f: &Forward<'_>) -> f64 {
    let mut t = Tape::new();
    let b = params.bind(&mut t, false);
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let y = f(&mut t, &b, &vars);
    t.value(y).dot(&weights(&t, y)).unwrap()
}

/// Worst relative error over sampled coordinates of every input and
/// parameter tensor.
fn check(name: &str, inputs: Vec<Tensor>, params: &ParamStore, f: &Forward<'_>) -> Result<f64, String> {
    let mut t = Tape::new();
    let bound = params.bind(&mut t, true);
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let y = f(&mut t, &bound, &vars);
    let w = t.constant(weights(&t, y));
    let p = t.mul(y, w).unwrap();
    let l = t.sum(p).unwrap();
    let grads = t.backward(l).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut judge = |what: String, analytic: f64, up: f64, down: f64| {
        let fd = (up - down) / (2.0 * STEP);
        let e = rel_err(analytic, fd);
        worst = worst.max(e);
        ensure(e <= REL_TOL, || format!("{name} {what}: analytic {analytic} vs fd {fd}"))
    };
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).ok_or_else(|| format!("{name}: no gradient for input {k}"))?;
        for _ in 0..COORDS.min(x.len()) {
            let i = rng.random_range(0..x.len());
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            judge(
                format!("input {k}[{i}]"),
                g.data()[i],
                loss_value(params, &plus, f),
                loss_value(params, &minus, f),
            )?;
        }
    }
    for (k, (pname, value)) in params.iter().enumerate() {
        let g = grads.get(bound.vars()[k]).ok_or_else(|| format!("{name}: no gradient for {pname}"))?;
        for _ in 0..COORDS.min(value.len()) {
            let i = rng.random_range(0..value.len());
            let mut p = params.clone();
            p.get_mut(ParamId(k)).data_mut()[i] += STEP;
            let up = loss_value(&p, &inputs, f);
            p.get_mut(ParamId(k)).data_mut()[i] -= 2.0 * STEP;
            let down = loss_value(&p, &inputs, f);
            judge(format!("{pname}[{i}]"), g.data()[i], up, down)?;
        }
    }
    Ok(worst)
}

fn primitive(name: &str, inputs: Vec<Tensor>, f: &Forward<'_>) -> Result<f64, String> {
    check(name, inputs, &ParamStore::default(), f)
}

fn primitives() -> Result<(usize, f64), String> {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &Forward<'_>| -> Result<(), String> {
        worst = worst.max(primitive(name, inputs, f)?);
        n += 1;
        Ok(())
    };
    run("conv3d s2", vec![rnd(&[2, 3, 6, 6, 6], 1), rnd(&[4, 3, 4, 4, 4], 2)], &|t, _, v| {
        t.conv3d(v[0], v[1], 2, 1).unwrap()
    })?;
    run("conv3d s1", vec![rnd(&[1, 2, 4, 4, 4], 3), rnd(&[2, 2, 3, 3, 3], 4)], &|t, _, v| {
        t.conv3d(v[0], v[1], 1, 1).unwrap()
    })?;
    run("conv_transpose3d", vec![rnd(&[2, 4, 3, 3, 3], 5), rnd(&[4, 2, 4, 4, 4], 6)], &|t, _, v| {
        t.conv_transpose3d(v[0], v[1], 2, 1).unwrap()
    })?;
    run("linear", vec![rnd(&[3, 5], 7), rnd(&[4, 5], 8), rnd(&[4], 9)], &|t, _, v| {
        t.linear(v[0], v[1], Some(v[2])).unwrap()
    })?;
    run("channel_bias", vec![rnd(&[2, 3, 2, 2, 2], 10), rnd(&[3], 11)], &|t, _, v| {
        t.channel_bias(v[0], v[1]).unwrap()
    })?;
    // Kept away from the kinks at 0.
    let x = rnd(&[2, 3, 4], 12).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    for kind in [Activation::LeakyRelu(0.2), Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
        run(&format!("{kind:?}"), vec![x.clone()], &move |t, _, v| t.activation(v[0], kind).unwrap())?;
    }
    let (a, b) = (rnd(&[3, 4], 13), rnd(&[3, 4], 14));
    run("add/sub/mul/affine", vec![a.clone(), b.clone()], &|t, _, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let m = t.scale(m, 0.7).unwrap();
        t.affine(m, -1.5, 0.25).unwrap()
    })?;
    run("mean/sum", vec![a.clone(), b.clone()], &|t, _, v| {
        let m = t.mean(v[0]).unwrap();
        let s = t.sum(v[1]).unwrap();
        t.mul(m, s).unwrap()
    })?;
    run("row_norm", vec![a.clone()], &|t, _, v| t.row_norm(v[0]).unwrap())?;
    run("clamped_log", vec![a.map(|v| v.abs() + 0.1)], &|t, _, v| t.clamped_log(v[0], 1e-12).unwrap())?;
    run("concat/slice/reshape", vec![a, b], &|t, _, v| {
        let c = t.concat(v[0], v[1]).unwrap();
        let s = t.slice(c, 2, 3).unwrap();
        t.reshape(s, &[12]).unwrap()
    })?;
    let bn = || vec![rnd(&[3, 2, 2, 3, 2], 15), rnd(&[2], 16), rnd(&[2], 17)];
    run("batch_norm train", bn(), &|t, _, v| t.batch_norm_train(v[0], v[1], v[2], None).unwrap())?;
    let stats = RunningStats { mean: vec![0.3, -0.2], var: vec![1.7, 0.4], momentum: 0.1 };
    run("batch_norm infer", bn(), &move |t, _, v| t.batch_norm_infer(v[0], v[1], v[2], &stats).unwrap())?;
    run("dropout", vec![rnd(&[4, 8], 18)], &|t, _, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        t.dropout(v[0], 0.5, Mode::Train, &mut rng).unwrap()
    })?;
    Ok((n, worst))
}

fn tiny() -> Architecture {
    Architecture {
        resolution: 8,
        latent_dim: 5,
        gen_channels: vec![4, 3],
        disc_channels: vec![3, 4],
        leaky_slope: 0.2,
        dropout: 0.5,
    }
}

/// Zero biases put activations exactly on a ReLU kink; shift every parameter.
fn jitter(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for k in 0..params.len() {
        for v in params.get_mut(ParamId(k)).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
}

fn stacks() -> Result<(usize, f64), String> {
    let arch = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut g = Generator::new(&arch, &mut rng).unwrap();
    let mut d = Discriminator::new(&arch, &mut rng).unwrap();
    let mut p = ProjectionNet::new(&arch, &mut rng).unwrap();
    jitter(&mut g.state.params, &mut rng);
    jitter(&mut d.state.params, &mut rng);
    jitter(&mut p.state.params, &mut rng);
    let z = Tensor::new([2, 5], (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let x = Tensor::new([2, 1, 8, 8, 8], (0..1024).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();

    let mut worst: f64 = 0.0;
    let mut n = 0;
    let mut run = |name: &str, input: &Tensor, params: &ParamStore, f: &Forward<'_>| -> Result<(), String> {
        worst = worst.max(check(name, vec![input.clone()], params, f)?);
        n += 1;
        Ok(())
    };
    run("generator", &z, g.params(), &|t, b, v| g.forward(t, b, v[0]).unwrap())?;
    run("generator train", &z, g.params(), &|t, b, v| g.clone().forward_train(t, b, v[0]).unwrap())?;
    run("discriminator score", &x, d.params(), &|t, b, v| d.forward(t, b, v[0]).unwrap().score)?;
    run("conv15", &x, d.params(), &|t, b, v| d.forward(t, b, v[0]).unwrap().features)?;
    run("discriminator train", &x, d.params(), &|t, b, v| {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        d.clone().forward_train(t, b, v[0], &mut r, false).unwrap().score
    })?;
    run("projection", &x, p.params(), &|t, b, v| p.forward(t, b, v[0]).unwrap())?;
    run("projection train", &x, p.params(), &|t, b, v| p.clone().forward_train(t, b, v[0]).unwrap())?;
    Ok((n, worst))
}

pub fn criterion() -> Outcome {
    let t = std::time::Instant::now();
    let (np, wp) = primitives()?;
    let (ns, ws) = stacks()?;
    within(t.elapsed(), std::time::Duration::from_secs(120))?;
    Ok(format!(
        "{np} primitive checks (worst rel err {wp:.2e}), {ns} network stacks (worst {ws:.2e}), tol {REL_TOL:.0e}"
    ))
}
