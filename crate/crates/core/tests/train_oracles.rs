use patt::autodiff::{Array, Mode, ParamStore, Tape};
use patt::train::{
    adamw_step, cross_entropy, focal_loss, lovasz_softmax, uncertainty_weighted, AdamState, AdamWConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// Jaccard loss of the foreground set `fg` when `wrong` is mispredicted.
fn jaccard_loss(fg: &[bool], wrong: &[bool]) -> f64 {
    let inter = fg.iter().zip(wrong).filter(|(f, w)| **f && !**w).count() as f64;
    let union = fg.iter().zip(wrong).filter(|(f, w)| **f || **w).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    }
}

/// The Jaccard loss is submodular, so its Lovász extension at `m` is the
/// maximum over all orderings of the greedy chain sum.
fn lovasz_extension_brute(fg: &[bool], m: &[f64]) -> f64 {
    let n = m.len();
    permutations(n)
        .into_iter()
        .map(|p| {
            let mut wrong = vec![false; n];
            let mut prev = 0.0;
            let mut total = 0.0;
            for &i in &p {
                wrong[i] = true;
                let cur = jaccard_loss(fg, &wrong);
                total += m[i] * (cur - prev);
                prev = cur;
            }
            total
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn lovasz_matches_brute_force_extension() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..60 {
        let n = rng.random_range(1..=6);
        let k = 3;
        let mut probs = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval);
        let p = tape.constant(Array::new(vec![n, k], probs.clone()).unwrap());
        let got = lovasz_softmax(&mut tape, p, &labels, None).unwrap();
        let got = tape.scalar(got);

        let mut terms = Vec::new();
        for c in 0..k {
            let fg: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
            if !fg.contains(&true) {
                continue;
            }
            let m: Vec<f64> = (0..n).map(|i| (f64::from(u8::from(fg[i])) - probs[i * k + c]).abs()).collect();
            terms.push(lovasz_extension_brute(&fg, &m));
        }
        let want = terms.iter().sum::<f64>() / terms.len() as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn lovasz_ignores_label() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let p = tape.constant(Array::new(vec![3, 2], vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5]).unwrap());
    let a = lovasz_softmax(&mut tape, p, &[0, 1, 1], Some(1)).unwrap();
    let q = tape.constant(Array::new(vec![1, 2], vec![0.9, 0.1]).unwrap());
    let b = lovasz_softmax(&mut tape, q, &[0], None).unwrap();
    assert!((tape.scalar(a) - tape.scalar(b)).abs() < 1e-15);
}

#[test]
fn cross_entropy_and_focal_closed_forms() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let logits = [1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
    let x = tape.constant(Array::new(vec![2, 3], logits.to_vec()).unwrap());
    let ce = cross_entropy(&mut tape, x, &[1, 0], None).unwrap();
    let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
    let want = ((lse(&logits[..3]) - 2.0) + (lse(&logits[3..]) + 1.0)) / 2.0;
    assert!((tape.scalar(ce) - want).abs() < 1e-12);

    let z = [0.3, -1.2, 2.0];
    let t = [1.0, 0.0, 0.0];
    let zv = tape.constant(Array::new(vec![3, 1], z.to_vec()).unwrap());
    let fl = focal_loss(&mut tape, zv, &t, Some(0.25), 2.0).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let want: f64 = z
        .iter()
        .zip(&t)
        .map(|(&z, &t)| {
            let p = sig(z);
            let (pt, at) = if t == 1.0 { (p, 0.25) } else { (1.0 - p, 0.75) };
            -at * (1.0 - pt).powi(2) * pt.ln()
        })
        .sum::<f64>()
        / 3.0;
    assert!((tape.scalar(fl) - want).abs() < 1e-12);
}

#[test]
fn uncertainty_weighting_value() {
    let mut store = ParamStore::new();
    store.insert("rho_a", Array::new(vec![1], vec![0.5]).unwrap()).unwrap();
    store.insert("rho_b", Array::new(vec![1], vec![-0.25]).unwrap()).unwrap();
    let mut tape = Tape::new(&store, Mode::Train);
    let la = tape.constant(Array::scalar(2.0));
    let lb = tape.constant(Array::scalar(3.0));
    let ra = tape.param("rho_a").unwrap();
    let rb = tape.param("rho_b").unwrap();
    let total = uncertainty_weighted(&mut tape, &[(la, ra), (lb, rb)]).unwrap();
    let want = (-0.5f64).exp() * 2.0 + 0.25 + 0.25f64.exp() * 3.0 - 0.125;
    assert!((tape.scalar(total) - want).abs() < 1e-12);
    let g = tape.backward(total).unwrap();
    // d/dρ = −exp(−ρ) L + 1/2
    assert!((g.param("rho_a").unwrap()[0] - (0.5 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
}

/// Two AdamW steps on one scalar with gradients 0.5 then −0.5, lr 0.1,
/// weight decay 0.01, default betas. Values worked out by hand, ε included.
#[test]
fn adamw_hand_values() {
    let mut store = ParamStore::new();
    store.insert("w", Array::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut state = AdamState::new();
    for (g, want) in [(0.5, 0.899_000_002), (-0.5, 0.903_364_159_8)] {
        let grads = {
            let mut tape = Tape::new(&store, Mode::Train);
            let w = tape.param("w").unwrap();
            let y = tape.mul_const(w, &[g]).unwrap();
            let y = tape.sum(y);
            tape.backward(y).unwrap()
        };
        adamw_step(&mut store, &grads, &mut state, 0.1, 0.01, AdamWConfig::default(), |_| true);
        let got = store.get("w").unwrap().value().data()[0];
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn adamw_skips_decay_when_excluded() {
    let mut store = ParamStore::new();
    store.insert("w", Array::new(vec![1], vec![2.0]).unwrap()).unwrap();
    let grads = {
        let mut tape = Tape::new(&store, Mode::Train);
        let w = tape.param("w").unwrap();
        let y = tape.mul_const(w, &[1.0]).unwrap();
        let y = tape.sum(y);
        tape.backward(y).unwrap()
    };
    adamw_step(&mut store, &grads, &mut AdamState::new(), 0.1, 0.5, AdamWConfig::default(), |_| false);
    // a first step moves by lr · g / (|g| + ε)
    let got = store.get("w").unwrap().value().data()[0];
    assert!((got - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
}
