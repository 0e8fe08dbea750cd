// Min-block identity checks shared by the block tests and the acceptance run.
// Each returns Err with a description of the first violation.

use minnet::blocks::{adapt_residual, MinBlock, MinBlockConfig};
use minnet::nn::{BufferStore, Forward, LayerBuilder, ParamStore};
use minnet::rng::{stream, Stream};
use minnet::{Tape, Tensor};
use rand::Rng as _;

pub const CONFIGS: [(usize, usize, usize, usize); 4] = [(4, 4, 2, 1), (3, 5, 2, 2), (6, 2, 3, 1), (4, 8, 1, 2)];

struct Fixture {
    params: ParamStore<f64>,
    buffers: BufferStore<f64>,
    block: MinBlock,
    x: Tensor<f64>,
}

fn fixture(cfg: (usize, usize, usize, usize), seed: u64) -> Fixture {
    let (d_in, d_out, q, stride) = cfg;
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = stream(seed, Stream::Init);
    let block = MinBlock::new(
        &mut LayerBuilder::new(&mut params, &mut buffers, &mut rng),
        "b",
        MinBlockConfig::new(d_in, d_out, q, stride),
    )
    .unwrap();
    let mut data = stream(seed, Stream::Data);
    let x = Tensor::from_fn(&[2, d_in, 8, 8], |_| data.gen_range(-1.0..1.0));
    Fixture { params, buffers, block, x }
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Tied filters `g = v`: the block computes exactly what a single `v` branch
/// computes, and the tie rule hands each filter half of the single-branch gradient.
pub fn tie_degeneracy(seed: u64) -> Result<(), String> {
    for cfg in CONFIGS {
        let mut fx = fixture(cfg, seed);
        let v = fx.params.tensor(fx.block.dws_v.weight).clone();
        *fx.params.tensor_mut(fx.block.dws_g.weight) = v;
        let proj_seed = &mut stream(seed, Stream::Probe);

        let mut tape = Tape::new();
        let vars = fx.params.bind(&mut tape);
        let mut f = Forward::new(&mut tape, &vars, &fx.buffers, true);
        f.keep_aux = true;
        let x = f.tape.input(fx.x.clone());
        let out = fx.block.forward(&mut f, x).map_err(|e| e.to_string())?;
        let aux = out.aux.unwrap();
        let w = Tensor::from_fn(f.tape.value(out.tensor).shape(), |_| proj_seed.gen_range(-1.0..1.0));
        let loss = f.tape.weighted_sum(out.tensor, w.clone()).unwrap();
        if bits(tape.value(aux.t2)) != bits(tape.value(aux.branch_v)) {
            return Err(format!("{cfg:?}: min of tied branches differs from the v branch"));
        }
        let tied_out = tape.value(out.tensor).clone();
        let g = tape.backward(loss).map_err(|e| e.to_string())?;

        // the same block with the min and the g branch removed
        let b = &fx.block;
        let mut tape1 = Tape::new();
        let vars1 = fx.params.bind(&mut tape1);
        let mut f = Forward::new(&mut tape1, &vars1, &fx.buffers, true);
        let x = f.tape.input(fx.x.clone());
        let t1 = f.conv(x, b.expand, 1, 0).unwrap();
        let t1 = f.batch_norm(t1, b.expand_bn).unwrap();
        let t1 = f.relu(t1).unwrap();
        let y = f.depthwise(t1, b.dws_v, b.cfg.stride, b.cfg.k_size / 2).unwrap();
        let y = f.tape.instance_norm(y).unwrap();
        let t2 = f.relu(y).unwrap();
        let t3 = f.conv(t2, b.project, 1, 0).unwrap();
        let t3 = f.batch_norm(t3, b.project_bn).unwrap();
        let t3 = f.relu(t3).unwrap();
        let s = adapt_residual(&mut f, x, b.residual.as_ref().unwrap()).unwrap();
        let single = f.tape.add(s, t3).unwrap();
        let loss1 = f.tape.weighted_sum(single, w).unwrap();
        if bits(&tied_out) != bits(tape1.value(single)) {
            return Err(format!("{cfg:?}: tied block output differs from the single-branch output"));
        }
        let g1 = tape1.backward(loss1).map_err(|e| e.to_string())?;

        let (iv, ig) = (b.dws_v.weight.0, b.dws_g.weight.0);
        let gv = g.get(vars[iv]).unwrap();
        let gg = g.get(vars[ig]).unwrap();
        if bits(gv) != bits(gg) {
            return Err(format!("{cfg:?}: tied filters received different gradients"));
        }
        let doubled = gv.map(|v| v * 2.0);
        if bits(&doubled) != bits(g1.get(vars1[iv]).unwrap()) {
            return Err(format!("{cfg:?}: tie split is not half the single-branch gradient"));
        }
        for (i, p) in fx.params.iter().enumerate() {
            if i == iv || i == ig {
                continue;
            }
            let (a, c) = (g.get(vars[i]), g1.get(vars1[i]));
            if a.map(bits) != c.map(bits) {
                return Err(format!("{cfg:?}: gradient of {} differs", p.name));
            }
        }
    }
    Ok(())
}

/// Zeroed expansion and projection weights leave only the shortcut.
pub fn zeroed_body(seed: u64) -> Result<(), String> {
    for cfg in CONFIGS {
        let mut fx = fixture(cfg, seed);
        for id in [fx.block.expand.weight, fx.block.project.weight] {
            let t = fx.params.tensor_mut(id);
            *t = Tensor::zeros(t.shape());
        }
        for training in [true, false] {
            let mut tape = Tape::new();
            let vars = fx.params.bind(&mut tape);
            let mut f = Forward::new(&mut tape, &vars, &fx.buffers, training);
            let x = f.tape.input(fx.x.clone());
            let out = fx.block.forward(&mut f, x).map_err(|e| e.to_string())?;
            let shortcut = adapt_residual(&mut f, x, fx.block.residual.as_ref().unwrap()).unwrap();
            if bits(tape.value(out.tensor)) != bits(tape.value(shortcut)) {
                return Err(format!("{cfg:?} training={training}: block output is not the shortcut"));
            }
        }
    }
    Ok(())
}

/// `ReLU(y - mu) / sigma` and `ReLU((y - mu) / sigma)` agree, and the block's
/// branch matches both; `y` is recomputed here by direct summation.
pub fn formulation_equivalence(seed: u64, tol: f64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for cfg in CONFIGS {
        let fx = fixture(cfg, seed);
        let mut tape = Tape::new();
        let vars = fx.params.bind(&mut tape);
        let mut f = Forward::new(&mut tape, &vars, &fx.buffers, true);
        f.keep_aux = true;
        let x = f.tape.input(fx.x.clone());
        let aux = fx.block.forward(&mut f, x).map_err(|e| e.to_string())?.aux.unwrap();
        let t1 = tape.value(aux.t1);
        let (n, c, h, w) = t1.dims4().unwrap();
        let s = fx.block.cfg.stride;
        let k = fx.block.cfg.k_size;
        let pad = k / 2;
        let (oh, ow) = ((h + 2 * pad - k) / s + 1, (w + 2 * pad - k) / s + 1);
        for (branch, layer) in [(aux.branch_v, fx.block.dws_v), (aux.branch_g, fx.block.dws_g)] {
            let kern = fx.params.tensor(layer.weight).data();
            let got = tape.value(branch).data();
            for img in 0..n {
                for ch in 0..c {
                    let mut y = vec![0.0f64; oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - pad as isize;
                                    let ix = (ox * s + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = t1.data()[((img * c + ch) * h + iy as usize) * w + ix as usize];
                                    acc += xv * kern[(ch * k + ky) * k + kx];
                                }
                            }
                            y[oy * ow + ox] = acc;
                        }
                    }
                    let mu = y.iter().sum::<f64>() / y.len() as f64;
                    let var = y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / y.len() as f64;
                    let sigma = (var + 1e-5).sqrt();
                    let base = (img * c + ch) * oh * ow;
                    for (i, &yv) in y.iter().enumerate() {
                        let inside = (yv - mu).max(0.0) / sigma;
                        let after = ((yv - mu) / sigma).max(0.0);
                        let impl_v = got[base + i];
                        let d = (inside - after).abs().max((impl_v - inside).abs());
                        worst = worst.max(d);
                        if d > tol {
                            return Err(format!("{cfg:?}: formulations differ by {d:e}"));
                        }
                    }
                }
            }
        }
    }
    Ok(worst)
}
