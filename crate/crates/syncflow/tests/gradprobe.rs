// scratch probe: input-state gradient check feasibility (removed later)
use std::rc::Rc;
use std::time::Instant;
use syncflow::ddit::params::Session;
use syncflow::ddit::{DualDit, TowerConfig};
use syncflow::numerics::{grad_check, SplitMix64, Tensor};
use syncflow::text::{TextCondition, Vocab};

#[test]
#[ignore]
fn probe_input_gradcheck() {
    let cfg = TowerConfig::tiny();
    let mut model = DualDit::new(cfg.clone()).unwrap();
    let vocab = Vocab::synthetic();

    // generic parameter point: default init plus noise everywhere
    let mut xp = model.store.flatten();
    let mut nrng = SplitMix64::new(777);
    for v in xp.data_mut() {
        *v += 0.1 * nrng.normal();
    }
    model.store.unflatten_from(&xp).unwrap();

    let b = 2usize;
    let nv = b * cfg.t_v * cfg.video_channels * cfg.grid_h * cfg.grid_w;
    let na = b * cfg.t_a * cfg.d_a;
    let vshape = vec![b, cfg.t_v, cfg.video_channels, cfg.grid_h, cfg.grid_w];
    let ashape = vec![b, cfg.t_a, cfg.d_a];

    for batch_seed in [11u64, 12, 13, 14] {
        let mut rng = SplitMix64::new(batch_seed);
        // targets: velocity fields for the fixed mini-batch
        let tv = Tensor::randn(&vshape, 1.0, &mut rng);
        let ta = Tensor::randn(&ashape, 1.0, &mut rng);
        let xt = Tensor::randn(&[nv + na], 1.0, &mut rng);
        let ts = vec![0.3f32, 0.7];
        let conds = vec![
            TextCondition::from_caption(&vocab, "a red ball bouncing fast"),
            TextCondition::from_caption(&vocab, "a blue ball bouncing slow"),
        ];

        let t0 = Instant::now();
        let err = grad_check(
            |tape, xv| {
                let owned = std::mem::take(tape);
                let mut sess = Session::from_tape(&model.store, owned);
                let run = (|| {
                    let vmap: Vec<u32> = (0..nv as u32).collect();
                    let amap: Vec<u32> = (nv as u32..(nv + na) as u32).collect();
                    let xt_v = sess.tape.gather(xv, Rc::new(vmap), vshape.clone())?;
                    let xt_a = sess.tape.gather(xv, Rc::new(amap), ashape.clone())?;
                    let (pv, pa) = model.forward_vars(&mut sess, xt_v, xt_a, &ts, &conds)?;
                    let tvv = sess.tape.constant(tv.clone());
                    let tav = sess.tape.constant(ta.clone());
                    let dv = sess.tape.sub(pv, tvv)?;
                    let sv = sess.tape.mul(dv, dv)?;
                    let lv = sess.tape.sum_all(sv)?;
                    let da = sess.tape.sub(pa, tav)?;
                    let sa = sess.tape.mul(da, da)?;
                    let la = sess.tape.sum_all(sa)?;
                    let sum = sess.tape.add(lv, la)?;
                    sess.tape.scale(sum, 1.0 / (nv + na) as f32)
                })();
                *tape = sess.into_tape();
                run
            },
            &xt,
            1e-2,
        )
        .unwrap();
        println!(
            "input grad check seed {batch_seed}: err {err:.3e} over {} coords in {:?}",
            nv + na,
            t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn localize_input_coords() {
    use syncflow::numerics::Tape;
    let cfg = TowerConfig::tiny();
    let mut model = DualDit::new(cfg.clone()).unwrap();
    let vocab = Vocab::synthetic();
    let mut xp = model.store.flatten();
    let mut nrng = SplitMix64::new(777);
    for v in xp.data_mut() {
        *v += 0.1 * nrng.normal();
    }
    model.store.unflatten_from(&xp).unwrap();

    let b = 2usize;
    let nv = b * cfg.t_v * cfg.video_channels * cfg.grid_h * cfg.grid_w;
    let na = b * cfg.t_a * cfg.d_a;
    let vshape = vec![b, cfg.t_v, cfg.video_channels, cfg.grid_h, cfg.grid_w];
    let ashape = vec![b, cfg.t_a, cfg.d_a];
    let mut rng = SplitMix64::new(11);
    let tv = Tensor::randn(&vshape, 1.0, &mut rng);
    let ta = Tensor::randn(&ashape, 1.0, &mut rng);
    let xt = Tensor::randn(&[nv + na], 1.0, &mut rng);
    let ts = vec![0.3f32, 0.7];
    let conds = vec![
        TextCondition::from_caption(&vocab, "a red ball bouncing fast"),
        TextCondition::from_caption(&vocab, "a blue ball bouncing slow"),
    ];

    let eval = |x: &Tensor, with_grad: bool| -> (f64, Option<Vec<f32>>) {
        let mut tape = Tape::new();
        let mut xc = x.clone();
        xc.requires_grad = with_grad;
        let xv = tape.leaf(xc);
        let mut sess = Session::from_tape(&model.store, tape);
        let vmap: Vec<u32> = (0..nv as u32).collect();
        let amap: Vec<u32> = (nv as u32..(nv + na) as u32).collect();
        let xt_v = sess.tape.gather(xv, Rc::new(vmap), vshape.clone()).unwrap();
        let xt_a = sess.tape.gather(xv, Rc::new(amap), ashape.clone()).unwrap();
        let (pv, pa) = model.forward_vars(&mut sess, xt_v, xt_a, &ts, &conds).unwrap();
        let tvv = sess.tape.constant(tv.clone());
        let tav = sess.tape.constant(ta.clone());
        let dv = sess.tape.sub(pv, tvv).unwrap();
        let sv = sess.tape.mul(dv, dv).unwrap();
        let lv = sess.tape.sum_all(sv).unwrap();
        let da = sess.tape.sub(pa, tav).unwrap();
        let sa = sess.tape.mul(da, da).unwrap();
        let la = sess.tape.sum_all(sa).unwrap();
        let sum = sess.tape.add(lv, la).unwrap();
        let loss = sess.tape.scale(sum, 1.0 / (nv + na) as f32).unwrap();
        let val = sess.tape.shadow(loss).unwrap();
        if with_grad {
            let g = sess.tape.backward(loss).unwrap().take(xv).unwrap();
            (val, Some(g.into_data()))
        } else {
            (val, None)
        }
    };

    let (_, grad) = eval(&xt, true);
    let grad = grad.unwrap();
    let eps: f32 = std::env::var("PROBE_EPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-2);
    let mut worst: Vec<(f32, usize, f64, f64)> = Vec::new();
    let mut probe = xt.clone();
    for i in 0..xt.numel() {
        let orig = xt.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (hi, _) = eval(&probe, false);
        probe.data_mut()[i] = orig - eps;
        let (lo, _) = eval(&probe, false);
        probe.data_mut()[i] = orig;
        let fd = (hi - lo) / (2.0 * eps as f64);
        let a = grad[i] as f64;
        let rel = ((a - fd).abs() / (a.abs() + 1e-8)) as f32;
        worst.push((rel, i, a, fd));
    }
    worst.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap());
    for (rel, i, a, fd) in worst.iter().take(10) {
        let side = if *i < nv { "video" } else { "audio" };
        println!("rel {rel:.3e}  {side} coord {i}  analytic {a:.6e}  fd {fd:.6e}");
    }
    let median = worst[worst.len() / 2].0;
    println!("median rel {median:.3e}");
}

#[test]
#[ignore]
fn scan_batch_seeds() {
    use syncflow::numerics::Tape;
    let cfg = TowerConfig::tiny();
    let mut model = DualDit::new(cfg.clone()).unwrap();
    let vocab = Vocab::synthetic();
    // keep the near-linear default init; only the zero-init output heads
    // get random weights so the chain carries signal
    let noise: f32 = std::env::var("PROBE_NOISE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);
    let mut xp = model.store.flatten();
    let mut nrng = SplitMix64::new(777);
    for v in xp.data_mut() {
        *v += noise * nrng.normal();
    }
    model.store.unflatten_from(&xp).unwrap();
    {
        let mut hrng = SplitMix64::new(4343);
        let names: Vec<(syncflow::ddit::params::ParamId, String, Vec<usize>)> = model
            .store
            .entries()
            .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
            .collect();
        for (id, name, shape) in names {
            if name == "video.head.w" || name == "audio.head.w" {
                *model.store.get_mut(id) = Tensor::randn(&shape, 0.05, &mut hrng);
            }
        }
    }

    let b = 2usize;
    let nv = b * cfg.t_v * cfg.video_channels * cfg.grid_h * cfg.grid_w;
    let na = b * cfg.t_a * cfg.d_a;
    let vshape = vec![b, cfg.t_v, cfg.video_channels, cfg.grid_h, cfg.grid_w];
    let ashape = vec![b, cfg.t_a, cfg.d_a];
    let ts = vec![0.3f32, 0.7];
    let conds = vec![
        TextCondition::from_caption(&vocab, "a red ball bouncing fast"),
        TextCondition::from_caption(&vocab, "a blue ball bouncing slow"),
    ];

    let eval = |xt: &Tensor, tv: &Tensor, ta: &Tensor, with_grad: bool| -> (f64, Option<Vec<f32>>) {
        let mut tape = Tape::new();
        let mut xc = xt.clone();
        xc.requires_grad = with_grad;
        let xv = tape.leaf(xc);
        let mut sess = Session::from_tape(&model.store, tape);
        let vmap: Vec<u32> = (0..nv as u32).collect();
        let amap: Vec<u32> = (nv as u32..(nv + na) as u32).collect();
        let xt_v = sess.tape.gather(xv, Rc::new(vmap), vshape.clone()).unwrap();
        let xt_a = sess.tape.gather(xv, Rc::new(amap), ashape.clone()).unwrap();
        let (pv, pa) = model.forward_vars(&mut sess, xt_v, xt_a, &ts, &conds).unwrap();
        let tvv = sess.tape.constant(tv.clone());
        let tav = sess.tape.constant(ta.clone());
        let dv = sess.tape.sub(pv, tvv).unwrap();
        let sv = sess.tape.mul(dv, dv).unwrap();
        let lv = sess.tape.sum_all(sv).unwrap();
        let da = sess.tape.sub(pa, tav).unwrap();
        let sa = sess.tape.mul(da, da).unwrap();
        let la = sess.tape.sum_all(sa).unwrap();
        let sum = sess.tape.add(lv, la).unwrap();
        let loss = sess.tape.scale(sum, 1.0 / (nv + na) as f32).unwrap();
        let val = sess.tape.shadow(loss).unwrap();
        if with_grad {
            let g = sess.tape.backward(loss).unwrap().take(xv).unwrap();
            (val, Some(g.into_data()))
        } else {
            (val, None)
        }
    };

    let dscale: f32 = std::env::var("PROBE_DSCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-2);
    // residuals matched to the perturbation scale: targets sit a small
    // delta away from the center-point predictions
    let center_pred = |xt: &Tensor| -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.leaf(xt.clone());
        let mut sess = Session::from_tape(&model.store, tape);
        let vmap: Vec<u32> = (0..nv as u32).collect();
        let amap: Vec<u32> = (nv as u32..(nv + na) as u32).collect();
        let xt_v = sess.tape.gather(xv, Rc::new(vmap), vshape.clone()).unwrap();
        let xt_a = sess.tape.gather(xv, Rc::new(amap), ashape.clone()).unwrap();
        let (pv, pa) = model.forward_vars(&mut sess, xt_v, xt_a, &ts, &conds).unwrap();
        (sess.tape.value(pv).clone(), sess.tape.value(pa).clone())
    };
    let mut best: Vec<(f32, u64)> = Vec::new();
    for seed in 0..400u64 {
        let mut rng = SplitMix64::new(seed);
        let xt = Tensor::randn(&[nv + na], 1.0, &mut rng);
        let (pv, pa) = center_pred(&xt);
        let mut tv = pv;
        for v in tv.data_mut() { *v += dscale * rng.normal(); }
        let mut ta = pa;
        for v in ta.data_mut() { *v += dscale * rng.normal(); }
        let (_, grad) = eval(&xt, &tv, &ta, true);
        let g = grad.unwrap();
        let min_a = g.iter().map(|v| v.abs()).fold(f32::MAX, f32::min);
        best.push((min_a, seed));
    }
    best.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("top min|grad| seeds:");
    for (m, s) in best.iter().take(8) {
        println!("  seed {s}: min |a| = {m:.4e}");
    }

    // full fd check for the best three
    let eps = 1e-2f32;
    for (_, seed) in best.iter().take(3) {
        let mut rng = SplitMix64::new(*seed);
        let xt = Tensor::randn(&[nv + na], 1.0, &mut rng);
        let (pv, pa) = center_pred(&xt);
        let mut tv = pv;
        for v in tv.data_mut() { *v += dscale * rng.normal(); }
        let mut ta = pa;
        for v in ta.data_mut() { *v += dscale * rng.normal(); }
        let (_, grad) = eval(&xt, &tv, &ta, true);
        let g = grad.unwrap();
        let mut max_rel = 0.0f32;
        let mut probe = xt.clone();
        for i in 0..xt.numel() {
            let orig = xt.data()[i];
            probe.data_mut()[i] = orig + eps;
            let (hi, _) = eval(&probe, &tv, &ta, false);
            probe.data_mut()[i] = orig - eps;
            let (lo, _) = eval(&probe, &tv, &ta, false);
            probe.data_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * eps as f64);
            let rel = ((g[i] as f64 - fd).abs() / (g[i].abs() as f64 + 1e-8)) as f32;
            max_rel = max_rel.max(rel);
        }
        println!("seed {seed}: full max rel = {max_rel:.4e}");
    }
}
