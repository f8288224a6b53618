use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::{Block, Linear};
use super::{segments, Graph, ParamId, ParamStore, Segments, Var};
use crate::error::Result;

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` receives a fresh graph and one leaf per entry of `inputs` and must
/// return a scalar node. Every input element is perturbed by `±h`; the result
/// is the largest `|a - n| / max(1e-8, |a| + |n|)` over all elements.
pub fn grad_check<F>(inputs: &[(Vec<f64>, Vec<usize>)], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .zip(inputs)
            .map(|(v, (_, shape))| g.input(v.clone(), shape))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|(v, s)| g.input(v.clone(), s)).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; vals[i].len()]);
        for j in 0..vals[i].len() {
            let orig = vals[i][j];
            vals[i][j] = orig + h;
            let plus = eval(&vals)?;
            vals[i][j] = orig - h;
            let minus = eval(&vals)?;
            vals[i][j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

/// Projects a tensor onto a fixed random direction so every output element
/// contributes to the scalar under test.
fn project(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(randn(&mut rng, n, 1.0), &shape)?;
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn check1(shape: &[usize], seed: u64, h: f64, build: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, shape.iter().product(), 1.0);
    grad_check(&[(x, shape.to_vec())], h, |g, v| {
        let y = build(g, v[0])?;
        project(g, y, seed + 100)
    })
}

/// A 4-wide, 2-head block with weights scaled up from the 0.02 init so the
/// check exercises non-trivial curvature.
pub(crate) fn tiny_block(seed: u64) -> Result<(ParamStore<f64>, Block)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = Block::new(&mut store, "blk", 4, 2, &mut rng)?;
    for p in store.iter_mut() {
        if p.name.ends_with("weight") {
            p.value.iter_mut().for_each(|w| *w *= 20.0);
        }
    }
    Ok((store, block))
}

/// Runs the block computation with parameters supplied as graph leaves, in the
/// store's parameter order, so `grad_check` can perturb them.
pub(crate) fn block_on_leaves(g: &mut Graph<'_, f64>, block: &Block, store: &ParamStore<f64>, leaves: &[Var], x: Var, segs: &Segments) -> Result<Var> {
    let leaf = |id: ParamId| -> Var {
        let idx = store.iter().position(|p| p.name == store.get(id).name).expect("parameter in store");
        leaves[idx]
    };
    let lin = |g: &mut Graph<'_, f64>, l: &Linear, x: Var| -> Result<Var> {
        let y = g.matmul(x, leaf(l.weight))?;
        g.add_row(y, leaf(l.bias))
    };
    let h = g.layer_norm(x, leaf(block.ln1.gamma), leaf(block.ln1.beta))?;
    let qkv = lin(g, &block.qkv, h)?;
    let a = g.causal_attention(qkv, block.heads, segs)?;
    let a = lin(g, &block.proj, a)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, leaf(block.ln2.gamma), leaf(block.ln2.beta))?;
    let h = lin(g, &block.fc, h)?;
    let h = g.gelu(h);
    let h = lin(g, &block.fc_out, h)?;
    g.add(x, h)
}

/// Worst relative gradient error of every differentiable graph op, plus a full
/// transformer block with its parameters as leaves. Inputs are seeded, so the
/// report is deterministic.
pub fn op_report(h: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![(randn(&mut rng, 12, 1.0), vec![3, 4]), (randn(&mut rng, 20, 1.0), vec![4, 5]), (randn(&mut rng, 10, 1.0), vec![5, 2])];
    out.push((
        "matmul",
        grad_check(&inputs, h, |g, v| {
            let ab = g.matmul(v[0], v[1])?;
            let abc = g.matmul(ab, v[2])?;
            project(g, abc, 7)
        })?,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        (randn(&mut rng, 12, 1.0), vec![4, 3]),
        (randn(&mut rng, 15, 1.0), vec![5, 3]),
        (randn(&mut rng, 20, 1.0), vec![4, 5]),
        (randn(&mut rng, 8, 1.0), vec![2, 4]),
    ];
    out.push((
        "matmul_t",
        grad_check(&inputs, h, |g, v| {
            let nt = g.matmul_t(v[0], v[1], false, true)?;
            let tn = g.matmul_t(v[0], v[2], true, false)?;
            let tt = g.matmul_t(v[0], v[3], true, true)?;
            let a = project(g, nt, 9)?;
            let b = project(g, tn, 10)?;
            let c = project(g, tt, 11)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        })?,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![(randn(&mut rng, 12, 1.0), vec![3, 4]), (randn(&mut rng, 12, 1.0), vec![3, 4]), (randn(&mut rng, 4, 1.0), vec![4])];
    out.push((
        "add/sub/mul/add_row/scale",
        grad_check(&inputs, h, |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let r = g.add_row(m, v[2])?;
            let sc = g.scale(r, 0.7);
            project(g, sc, 11)
        })?,
    ));

    // Inputs kept away from the ReLU kink.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = randn(&mut rng, 16, 1.0).into_iter().map(|v| if v.abs() < 0.1 { v + 0.3 } else { v }).collect();
    out.push((
        "relu",
        grad_check(&[(x, vec![4, 4])], h, |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 12)
        })?,
    ));
    out.push(("gelu", check1(&[4, 4], 6, h, |g, x| Ok(g.gelu(x)))?));
    out.push(("tanh", check1(&[4, 4], 7, h, |g, x| Ok(g.tanh(x)))?));
    out.push(("softmax", check1(&[3, 5], 8, h, |g, x| Ok(g.softmax(x)))?));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![(randn(&mut rng, 24, 2.0), vec![4, 6]), (randn(&mut rng, 6, 1.0), vec![6]), (randn(&mut rng, 6, 1.0), vec![6])];
    out.push((
        "layer_norm",
        grad_check(&inputs, h, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, 13)
        })?,
    ));
    out.push((
        "embedding/gather_rows",
        check1(&[6, 4], 10, h, |g, t| {
            let e = g.embedding(t, &[3, 0, 3, 5, 1])?;
            g.gather_rows(e, &[4, 0, 2, 2])
        })?,
    ));
    let segs = segments(&[3, 5]);
    out.push(("causal_attention", check1(&[8, 12], 11, h, |g, qkv| g.causal_attention(qkv, 2, &segs))?));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (targets, mask) = ([1, 4, 0, 2], [true, true, false, true]);
    out.push(("cross_entropy", grad_check(&[(randn(&mut rng, 20, 2.0), vec![4, 5])], h, |g, v| g.cross_entropy(v[0], &targets, &mask))?));

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![(randn(&mut rng, 10, 1.0), vec![2, 5]), (randn(&mut rng, 10, 1.0), vec![2, 5])];
    out.push(("l1_loss", grad_check(&inputs, h, |g, v| g.l1_loss(v[0], v[1]))?));
    out.push(("mse_loss", grad_check(&inputs, h, |g, v| g.mse_loss(v[0], v[1]))?));

    let segs = segments(&[2, 4]);
    out.push(("mean_rows", check1(&[6, 3], 14, h, |g, x| g.mean_rows(x, &segs))?));
    out.push(("normalize_rows", check1(&[3, 4], 15, h, |g, x| Ok(g.normalize_rows(x)))?));
    out.push(("slice_cols", check1(&[3, 5], 16, h, |g, x| g.slice_cols(x, 1, 4))?));
    let segs = segments(&[4, 3]);
    out.push(("time_unfold", check1(&[7, 2], 17, h, |g, x| g.time_unfold(x, 5, &segs))?));

    let (store, block) = tiny_block(21)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut inputs = vec![(randn(&mut rng, 32, 1.0), vec![8, 4])];
    inputs.extend(store.iter().map(|p| (p.value.clone(), p.shape.clone())));
    let segs = segments(&[8]);
    out.push((
        "transformer_block",
        grad_check(&inputs, h, |g, v| {
            let y = block_on_leaves(g, &block, &store, &v[1..], v[0], &segs)?;
            project(g, y, 23)
        })?,
    ));
    Ok(out)
}
