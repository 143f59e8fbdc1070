//! Prototype-similarity classification, baseline linear heads, the
//! joint loss, and evaluation metrics (per-AU F1, UAR, WAR, and
//! cross-dataset subset scoring over shared AU labels).

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, VarId};

/// `scores[b][c] = cos(Z_b, T_c) / tau`; both sides are L2-normalized
/// here, so callers pass raw (unnormalized) embeddings.
pub fn similarity_scores(tape: &mut Tape, z: VarId, t: VarId, tau: f64) -> Result<VarId> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let zn = tape.row_l2_norm(z)?;
    let tn = tape.row_l2_norm(t)?;
    let tt = tape.transpose(tn);
    let cos = tape.matmul(zn, tt);
    Ok(tape.scale_const(cos, 1.0 / tau))
}

fn check_one_hot(labels: &Tensor) -> Result<()> {
    for r in 0..labels.rows() {
        let row = labels.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "label row {r} is not one-hot"
            )));
        }
    }
    Ok(())
}

fn check_binary(labels: &Tensor) -> Result<()> {
    if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("labels must be binary".into()));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch; labels one-hot B×K.
pub fn dfer_loss(tape: &mut Tape, scores: VarId, labels: &Tensor) -> Result<VarId> {
    check_one_hot(labels)?;
    if !tape.value(scores).same_shape(labels) {
        return Err(Error::Shape("shape mismatch".into()));
    }
    Ok(tape.softmax_ce_mean(scores, labels.clone()))
}

/// Mean binary cross-entropy over every batch-AU entry (B·M terms).
pub fn au_loss(tape: &mut Tape, scores: VarId, labels: &Tensor) -> Result<VarId> {
    check_binary(labels)?;
    if !tape.value(scores).same_shape(labels) {
        return Err(Error::Shape("shape mismatch".into()));
    }
    Ok(tape.bce_logits_mean(scores, labels.clone()))
}

/// Convex weights `(1/(1+λ), λ/(1+λ))` for the DFER and AU terms.
pub fn loss_weights(lambda: f64) -> Result<(f64, f64)> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok((1.0 / (1.0 + lambda), lambda / (1.0 + lambda)))
}

pub fn total_loss(tape: &mut Tape, l_dfe: VarId, l_au: VarId, lambda: f64) -> Result<VarId> {
    let (w_dfe, w_au) = loss_weights(lambda)?;
    let a = tape.scale_const(l_dfe, w_dfe);
    let b = tape.scale_const(l_au, w_au);
    Ok(tape.add(a, b))
}

/// Plain affine head `Z·W + b` for the no-prototype baseline.
pub fn baseline_logits(tape: &mut Tape, z: VarId, w: VarId, b: VarId) -> VarId {
    let lin = tape.matmul(z, w);
    tape.add_row_broadcast(lin, b)
}

/// Argmax per row; exact ties resolve to the lowest index.
pub fn predict_expression(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Per-AU decision `sigmoid(score) > 0.5`, i.e. score strictly positive.
pub fn predict_au(scores: &Tensor) -> Tensor {
    scores.map(|s| if s > 0.0 { 1.0 } else { 0.0 })
}

/// Per-AU `F1 = 2TP / (2TP + FP + FN)` plus the unweighted average.
/// An AU with no positives in either prediction or truth scores 0.
pub fn f1_scores(pred: &Tensor, truth: &Tensor) -> Result<(Vec<f64>, f64)> {
    check_binary(pred)?;
    check_binary(truth)?;
    if !pred.same_shape(truth) {
        return Err(Error::Shape("shape mismatch".into()));
    }
    let m = pred.cols();
    let mut per = Vec::with_capacity(m);
    for c in 0..m {
        let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
        for r in 0..pred.rows() {
            match (pred.at(r, c) == 1.0, truth.at(r, c) == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fne;
        per.push(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 });
    }
    let avg = per.iter().sum::<f64>() / m as f64;
    Ok((per, avg))
}

/// Unweighted and weighted average recall over K expression classes.
/// Zero-support classes are excluded from the UAR mean.
pub fn uar_war(pred: &[usize], truth: &[usize], k: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape("shape mismatch".into()));
    }
    if pred.iter().chain(truth).any(|&c| c >= k) {
        return Err(Error::InvalidArgument("class id out of range".into()));
    }
    let mut support = vec![0u64; k];
    let mut correct = vec![0u64; k];
    let mut hits = 0u64;
    for (&p, &t) in pred.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            correct[t] += 1;
            hits += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric(
            "every class has zero support".into(),
        ));
    }
    let uar = present
        .iter()
        .map(|&c| correct[c] as f64 / support[c] as f64)
        .sum::<f64>()
        / present.len() as f64;
    let war = hits as f64 / truth.len() as f64;
    Ok((uar, war))
}

/// K×K counts, rows = true class, columns = predicted class.
pub fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape("shape mismatch".into()));
    }
    if pred.iter().chain(truth).any(|&c| c >= k) {
        return Err(Error::InvalidArgument("class id out of range".into()));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Evaluation summary; serializes to JSON as-is.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub per_au_f1: Vec<f64>,
    pub avg_f1: f64,
    pub uar: f64,
    pub war: f64,
    pub confusion: Vec<Vec<u64>>,
}

/// Cross-dataset evaluation: keep only the AUs whose FACS ids appear in
/// both label sets, selecting score/truth columns by id, then score as
/// usual. Returns the shared ids (in source order) with per-AU F1s.
pub fn subset_eval(
    scores: &Tensor,
    source_set: &[u32],
    truth: &Tensor,
    target_set: &[u32],
) -> Result<(Vec<u32>, Vec<f64>, f64)> {
    if scores.cols() != source_set.len() || truth.cols() != target_set.len() {
        return Err(Error::Shape("shape mismatch".into()));
    }
    let shared: Vec<u32> = source_set
        .iter()
        .copied()
        .filter(|id| target_set.contains(id))
        .collect();
    if shared.is_empty() {
        return Err(Error::Config(
            "label sets share no action units".into(),
        ));
    }
    let pick = |set: &[u32], data: &Tensor| -> Tensor {
        let cols: Vec<usize> = shared
            .iter()
            .map(|id| set.iter().position(|x| x == id).expect("shared id present"))
            .collect();
        let mut out = Tensor::zeros(data.rows(), cols.len());
        for r in 0..data.rows() {
            for (j, &c) in cols.iter().enumerate() {
                out.set(r, j, data.at(r, c));
            }
        }
        out
    };
    let pred = predict_au(&pick(source_set, scores));
    let sub_truth = pick(target_set, truth);
    let (per, avg) = f1_scores(&pred, &sub_truth)?;
    Ok((shared, per, avg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facs::{BP4D_AUS, DISFA_AUS};
    use crate::numerics::{grad_check, seeded_gaussian, ParamGroup, ParamStore};
    use proptest::prelude::*;
    use rand::{rngs::StdRng, Rng as _, SeedableRng as _};

    #[test]
    fn similarity_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![-5.0, 0.0]]).unwrap());
        let t = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let s = similarity_scores(&mut tape, z, t, 0.01).unwrap();
        let v = tape.value(s);
        assert!((v.at(0, 0) - 100.0).abs() < 1e-9); // same direction
        assert!(v.at(1, 0).abs() < 1e-9); // orthogonal
        assert!((v.at(2, 0) + 100.0).abs() < 1e-9); // antipodal
    }

    #[test]
    fn similarity_rejects_bad_inputs() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::ones(1, 2));
        let t = tape.constant(Tensor::ones(1, 2));
        assert!(similarity_scores(&mut tape, z, t, 0.0).is_err());
        let zero = tape.constant(Tensor::zeros(1, 2));
        assert!(matches!(
            similarity_scores(&mut tape, zero, t, 0.01),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn dfer_loss_uniform_and_confident() {
        let mut tape = Tape::new();
        let scores = tape.constant(Tensor::zeros(3, 7));
        let labels = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let l = dfer_loss(&mut tape, scores, &labels).unwrap();
        assert!((tape.value(l).data()[0] - (7f64).ln()).abs() < 1e-12);

        // K=2, true-class score 10: loss = -ln(e^10/(e^10+1))
        let s2 = tape.constant(Tensor::from_rows(&[vec![10.0, 0.0]]).unwrap());
        let y2 = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l2 = dfer_loss(&mut tape, s2, &y2).unwrap();
        let expect = -((10f64.exp()) / (10f64.exp() + 1.0)).ln();
        assert!((tape.value(l2).data()[0] - expect).abs() < 1e-12);
        assert!(expect < 1e-4 && expect > 1e-5);
    }

    #[test]
    fn dfer_rejects_non_one_hot() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(1, 3));
        let bad = Tensor::from_rows(&[vec![0.5, 0.5, 0.0]]).unwrap();
        assert!(dfer_loss(&mut tape, s, &bad).is_err());
    }

    #[test]
    fn au_loss_closed_forms() {
        let mut tape = Tape::new();
        let zeros = tape.constant(Tensor::zeros(4, 3));
        let labels = predict_au(&seeded_gaussian(1, "lbl", 4, 3, 1.0));
        let l = au_loss(&mut tape, zeros, &labels).unwrap();
        assert!((tape.value(l).data()[0] - (2f64).ln()).abs() < 1e-12);

        let s = tape.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        let y = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let l1 = au_loss(&mut tape, s, &y).unwrap();
        let expect = -(1.0 / (1.0 + (-2f64).exp())).ln();
        assert!((tape.value(l1).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.1269).abs() < 1e-4);

        // saturated perfect scores
        let sp = tape.constant(Tensor::from_rows(&[vec![100.0, -100.0]]).unwrap());
        let yp = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let lp = au_loss(&mut tape, sp, &yp).unwrap();
        assert!(tape.value(lp).data()[0] <= 1e-20);
    }

    #[test]
    fn au_loss_averages_over_batch_and_aus() {
        // one confident wrong entry among 2x3: total = that term / 6
        let mut tape = Tape::new();
        let mut scores = Tensor::zeros(2, 3);
        scores.set(0, 0, 3.0);
        scores.set(0, 1, 50.0);
        scores.set(0, 2, -50.0);
        scores.set(1, 0, 50.0);
        scores.set(1, 1, -50.0);
        scores.set(1, 2, 50.0);
        let s = tape.constant(scores);
        let y = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0]]).unwrap();
        let l = au_loss(&mut tape, s, &y).unwrap();
        let term = (1.0f64 + (-3f64).exp()).ln() - 0.0; // -ln σ(3)
        let expect = ((3f64).exp().recip().ln_1p() + 0.0) / 6.0;
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);
        assert!((tape.value(l).data()[0] - term / 6.0).abs() < 1e-10);
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.9));
        let b = tape.constant(Tensor::scalar(0.3));
        let t = total_loss(&mut tape, a, b, 2.0).unwrap();
        assert!((tape.value(t).data()[0] - 0.5).abs() < 1e-12);
        let t0 = total_loss(&mut tape, a, b, 0.0).unwrap();
        assert_eq!(tape.value(t0).data()[0], 0.9);
        let (w_dfe, w_au) = loss_weights(1e7).unwrap();
        assert!(w_dfe < 1e-6);
        assert!((w_dfe + w_au - 1.0).abs() < 1e-12);
        assert!(loss_weights(-0.1).is_err());
    }

    #[test]
    fn baseline_head_gradients_and_uniform_loss() {
        let mut store = ParamStore::new();
        store
            .register("w", ParamGroup::Head, seeded_gaussian(3, "w", 4, 5, 0.1), true)
            .unwrap();
        store
            .register("b", ParamGroup::Head, Tensor::zeros(1, 5), true)
            .unwrap();
        let z_val = seeded_gaussian(3, "z", 6, 4, 1.0);
        let mut labels = Tensor::zeros(6, 5);
        for r in 0..6 {
            labels.set(r, r % 5, 1.0);
        }
        // zero head -> uniform softmax
        {
            let mut tape = Tape::new();
            let z = tape.constant(z_val.clone());
            let w = tape.constant(Tensor::zeros(4, 5));
            let b = tape.constant(Tensor::zeros(1, 5));
            let logits = baseline_logits(&mut tape, z, w, b);
            let l = dfer_loss(&mut tape, logits, &labels).unwrap();
            assert!((tape.value(l).data()[0] - (5f64).ln()).abs() < 1e-12);
        }
        let report = grad_check(
            &mut store,
            |st: &mut ParamStore, acc: bool| {
                let mut tape = Tape::new();
                let z = tape.constant(z_val.clone());
                let w = tape.leaf(st.by_name("w")?.value.clone(), true);
                let b = tape.leaf(st.by_name("b")?.value.clone(), true);
                let logits = baseline_logits(&mut tape, z, w, b);
                let l = dfer_loss(&mut tape, logits, &labels)?;
                if acc {
                    let grads = tape.backward(l);
                    for (i, name) in [(1usize, "w"), (2usize, "b")] {
                        if let Some(g) = &grads[i] {
                            st.by_name_mut(name)?.grad.add_assign(g);
                        }
                    }
                }
                Ok(tape.value(l).data()[0])
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4);
    }

    #[test]
    fn predictions_and_ties() {
        let s = Tensor::from_rows(&[vec![0.2, 0.9, 0.1], vec![0.5, 0.5, 0.1]]).unwrap();
        assert_eq!(predict_expression(&s), vec![1, 0]);
        let au = predict_au(&Tensor::from_rows(&[vec![-3.0, 3.0, 0.0]]).unwrap());
        assert_eq!(au.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn f1_hand_cases() {
        // AU0: TP=1, FP=1, FN=0 -> 2/3; AU1 perfect -> 1
        let pred = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let truth = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let (per, avg) = f1_scores(&pred, &truth).unwrap();
        assert!((per[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(per[1], 1.0);
        assert!((avg - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        // zero support, zero predictions -> 0 by convention
        let z = Tensor::zeros(3, 1);
        let (per0, _) = f1_scores(&z, &z).unwrap();
        assert_eq!(per0[0], 0.0);
    }

    #[test]
    fn uar_war_hand_case() {
        // class 0: 3/3, class 1: 0/1
        let truth = [0, 0, 0, 1];
        let pred = [0, 0, 0, 0];
        let (uar, war) = uar_war(&pred, &truth, 3).unwrap();
        assert!((uar - 0.5).abs() < 1e-12);
        assert!((war - 0.75).abs() < 1e-12);
        let perfect = uar_war(&truth, &truth, 2).unwrap();
        assert_eq!(perfect, (1.0, 1.0));
        assert!(matches!(uar_war(&[], &[], 2), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn metrics_match_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.gen_range(1..60);
            let m = rng.gen_range(1..6);
            let k = rng.gen_range(2..8);
            let pred_m = Tensor::new(n, m, (0..n * m).map(|_| f64::from(rng.gen_range(0..2))).collect()).unwrap();
            let truth_m = Tensor::new(n, m, (0..n * m).map(|_| f64::from(rng.gen_range(0..2))).collect()).unwrap();
            let (per, _) = f1_scores(&pred_m, &truth_m).unwrap();
            for c in 0..m {
                let mut tp = 0.0;
                let mut fp = 0.0;
                let mut fne = 0.0;
                for r in 0..n {
                    tp += pred_m.at(r, c) * truth_m.at(r, c);
                    fp += pred_m.at(r, c) * (1.0 - truth_m.at(r, c));
                    fne += (1.0 - pred_m.at(r, c)) * truth_m.at(r, c);
                }
                let expect = if tp + fp + fne == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fne) };
                assert_eq!(per[c], expect);
            }

            let truth_c: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let pred_c: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let (uar, war) = uar_war(&pred_c, &truth_c, k).unwrap();
            let mut recalls = Vec::new();
            for c in 0..k {
                let sup = truth_c.iter().filter(|&&t| t == c).count();
                if sup > 0 {
                    let cor = truth_c
                        .iter()
                        .zip(&pred_c)
                        .filter(|(&t, &p)| t == c && p == c)
                        .count();
                    recalls.push(cor as f64 / sup as f64);
                }
            }
            let expect_uar = recalls.iter().sum::<f64>() / recalls.len() as f64;
            let expect_war =
                truth_c.iter().zip(&pred_c).filter(|(t, p)| t == p).count() as f64 / n as f64;
            assert_eq!(uar, expect_uar);
            assert_eq!(war, expect_war);

            let cm = confusion(&pred_c, &truth_c, k).unwrap();
            let total: u64 = cm.iter().flatten().sum();
            assert_eq!(total as usize, n);
        }
    }

    #[test]
    fn subset_eval_shared_aus() {
        // BP4D vs DISFA shares exactly {1,2,4,6,12}
        let n = 10;
        let scores = seeded_gaussian(5, "scores", n, BP4D_AUS.len(), 1.0);
        let truth = predict_au(&seeded_gaussian(6, "truth", n, DISFA_AUS.len(), 1.0));
        let (shared, per, avg) = subset_eval(&scores, &BP4D_AUS, &truth, &DISFA_AUS).unwrap();
        assert_eq!(shared, vec![1, 2, 4, 6, 12]);
        assert_eq!(per.len(), 5);
        assert!((0.0..=1.0).contains(&avg));

        // identical sets: identity selection reproduces plain scoring
        let truth_b = predict_au(&seeded_gaussian(7, "tb", n, BP4D_AUS.len(), 1.0));
        let (shared_b, per_b, _) = subset_eval(&scores, &BP4D_AUS, &truth_b, &BP4D_AUS).unwrap();
        assert_eq!(shared_b.len(), BP4D_AUS.len());
        let (direct, _) = f1_scores(&predict_au(&scores), &truth_b).unwrap();
        assert_eq!(per_b, direct);

        // disjoint sets
        let e = subset_eval(&scores, &BP4D_AUS, &Tensor::zeros(n, 2), &[91, 92]);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn au_loss_label_flip_symmetry(vals in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let s = Tensor::new(2, 4, vals.clone()).unwrap();
            let y = predict_au(&seeded_gaussian(9, "y", 2, 4, 1.0));
            let flipped_s = s.map(|x| -x);
            let flipped_y = y.map(|v| 1.0 - v);
            let mut tape = Tape::new();
            let a = tape.constant(s);
            let b = tape.constant(flipped_s);
            let la = au_loss(&mut tape, a, &y).unwrap();
            let lb = au_loss(&mut tape, b, &flipped_y).unwrap();
            prop_assert_eq!(tape.value(la).data()[0], tape.value(lb).data()[0]);
        }

        #[test]
        fn total_weights_sum_to_one(lambda in 0.0f64..1e6) {
            let (a, b) = loss_weights(lambda).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn argmax_scale_invariance(vals in proptest::collection::vec(-3.0f64..3.0, 5), scale in 0.01f64..100.0) {
            let s = Tensor::new(1, 5, vals).unwrap();
            let scaled = s.map(|x| x * scale);
            prop_assert_eq!(predict_expression(&s), predict_expression(&scaled));
        }

        #[test]
        fn dfer_monotone_in_true_score(base in -2.0f64..2.0, bump in 0.0f64..3.0) {
            let y = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
            let eval = |t: f64| {
                let mut tape = Tape::new();
                let s = tape.constant(Tensor::from_rows(&[vec![t, 0.3, -0.4]]).unwrap());
                let l = dfer_loss(&mut tape, s, &y).unwrap();
                tape.value(l).data()[0]
            };
            prop_assert!(eval(base + bump) <= eval(base) + 1e-12);
        }
    }
}
