use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Mean `−log softmax(logits)[label]` over rows whose label is not `ignore`.
pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, labels: &[u32], ignore: Option<u32>) -> Result<Var> {
    let (n, k) = tape.value(logits).dims2()?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![n, k],
            rhs: vec![labels.len()],
        });
    }
    let mut pick = vec![0.0; n * k];
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if Some(l) == ignore {
            continue;
        }
        if l as usize >= k {
            return Err(Error::IndexOutOfRange { index: l as usize, len: k });
        }
        pick[i * k + l as usize] = 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("cross entropy: every point is ignored"));
    }
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul_const(ls, &pick)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / count as f64))
}

/// Gradient of the Lovász extension of the Jaccard loss for a ground-truth
/// indicator already sorted by descending error.
pub fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = gt_sorted.iter().sum();
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        cum_fg += g;
        cum_bg += 1.0 - g;
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-softmax over the classes present in `labels`, averaged.
/// `probs` rows are class distributions. Returns 0 when no class is present.
pub fn lovasz_softmax(tape: &mut Tape<'_>, probs: Var, labels: &[u32], ignore: Option<u32>) -> Result<Var> {
    let (n, k) = tape.value(probs).dims2()?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "lovasz_softmax",
            lhs: vec![n, k],
            rhs: vec![labels.len()],
        });
    }
    let keep: Vec<usize> = (0..n).filter(|&i| Some(labels[i]) != ignore).collect();
    if let Some(&i) = keep.iter().find(|&&i| labels[i] as usize >= k) {
        return Err(Error::IndexOutOfRange { index: labels[i] as usize, len: k });
    }
    let p = if keep.len() == n { probs } else { tape.gather_rows(probs, &keep)? };
    let lab: Vec<u32> = keep.iter().map(|&i| labels[i]).collect();
    let m = lab.len();

    let mut terms = Vec::new();
    for c in 0..k {
        let fg: Vec<f64> = lab.iter().map(|&l| f64::from(u8::from(l as usize == c))).collect();
        if !fg.iter().any(|&g| g > 0.0) {
            continue;
        }
        let pc: Vec<f64> = (0..m).map(|i| tape.value(p).get(i, c)).collect();
        let err: Vec<f64> = (0..m).map(|i| (fg[i] - pc[i]).abs()).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
        let g_sorted: Vec<f64> = order.iter().map(|&i| fg[i]).collect();
        let w_sorted = lovasz_grad(&g_sorted);
        let mut w = vec![0.0; m];
        for (r, &i) in order.iter().enumerate() {
            w[i] = w_sorted[r];
        }
        // |fg − p| = fg + (1 − 2 fg) p for fg ∈ {0, 1}
        let col = tape.slice_cols(p, c, c + 1)?;
        let sign: Vec<f64> = fg.iter().map(|g| 1.0 - 2.0 * g).collect();
        let e = tape.mul_const(col, &sign)?;
        let e = tape.add_const(e, &fg)?;
        let we = tape.mul_const(e, &w)?;
        terms.push(tape.sum(we));
    }
    if terms.is_empty() {
        let z = tape.mul_const(p, &vec![0.0; m * k])?;
        return Ok(tape.sum(z));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Mean binary focal loss `−α_t (1 − p_t)^γ log p_t` with `p = σ(logit)`.
/// `alpha = None` drops the class weighting (`α_t = 1`).
pub fn focal_loss(tape: &mut Tape<'_>, logits: Var, targets: &[f64], alpha: Option<f64>, gamma: f64) -> Result<Var> {
    let n = tape.value(logits).len();
    if targets.len() != n {
        return Err(Error::Shape {
            op: "focal_loss",
            lhs: tape.value(logits).shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!("focal loss target {t} is not 0 or 1")));
    }
    // log p_t = log σ((2t − 1) x)
    let sign: Vec<f64> = targets.iter().map(|t| 2.0 * t - 1.0).collect();
    let z = tape.mul_const(logits, &sign)?;
    let log_pt = tape.log_sigmoid(z);
    let weighted = if gamma == 0.0 {
        log_pt
    } else {
        // 1 − p_t = σ(−(2t − 1) x)
        let neg: Vec<f64> = sign.iter().map(|s| -s).collect();
        let zn = tape.mul_const(logits, &neg)?;
        let q = tape.sigmoid(zn);
        let mod_ = tape.pow(q, gamma);
        tape.mul(mod_, log_pt)?
    };
    let at: Vec<f64> = match alpha {
        Some(a) => targets.iter().map(|&t| -(a * t + (1.0 - a) * (1.0 - t))).collect(),
        None => vec![-1.0; n],
    };
    let l = tape.mul_const(weighted, &at)?;
    Ok(tape.mean(l))
}

/// Mean smooth-L1 of `pred − target`.
pub fn smooth_l1(tape: &mut Tape<'_>, pred: Var, target: &[f64], beta: f64) -> Result<Var> {
    let neg: Vec<f64> = target.iter().map(|t| -t).collect();
    let d = tape.add_const(pred, &neg)?;
    let s = tape.smooth_l1(d, beta);
    Ok(tape.mean(s))
}

/// `Σ_t exp(−ρ_t) L_t + ρ_t / 2` over the given `(loss, log-variance)` pairs.
pub fn uncertainty_weighted(tape: &mut Tape<'_>, terms: &[(Var, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(l, rho) in terms {
        let nr = tape.scale(rho, -1.0);
        let w = tape.exp(nr);
        let wl = tape.mul(w, l)?;
        let half = tape.scale(rho, 0.5);
        let t = tape.add(wl, half)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::invalid("uncertainty weighting needs at least one task"))
}
