//! Region-overlap + voxel-wise classification loss over softmax
//! probabilities. Dice statistics pool over the whole batch; cross-entropy
//! averages over voxels. All accumulation in f64.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_WEIGHT: f64 = 0.7;
pub const CE_WEIGHT: f64 = 0.3;
pub const DICE_EPS: f64 = 1e-5;

/// Per-voxel softmax with a max-shift; returns probabilities for one voxel.
fn softmax_at<T: Scalar>(logits: &Tensor<T>, b: usize, v: usize, k: usize, sp: usize, out: &mut [f64]) {
    let base = b * k * sp + v;
    let mut m = f64::NEG_INFINITY;
    for c in 0..k {
        m = m.max(logits.data()[base + c * sp].dbl());
    }
    let mut z = 0.0;
    for c in 0..k {
        let e = (logits.data()[base + c * sp].dbl() - m).exp();
        out[c] = e;
        z += e;
    }
    for p in out.iter_mut().take(k) {
        *p /= z;
    }
}

struct Stats {
    inter: Vec<f64>,
    sums: Vec<f64>,
    ce: f64,
}

fn gather_stats<T: Scalar>(logits: &Tensor<T>, labels: &[u32], k: usize) -> Stats {
    let [b, _, d, h, w] = logits.d5();
    let sp = d * h * w;
    let mut inter = vec![0.0; k];
    let mut sums = vec![0.0; k];
    let mut ce = 0.0;
    let mut p = vec![0.0; k];
    for bi in 0..b {
        for v in 0..sp {
            softmax_at(logits, bi, v, k, sp, &mut p);
            let lab = labels[bi * sp + v] as usize;
            for c in 0..k {
                sums[c] += p[c];
            }
            inter[lab] += p[lab];
            sums[lab] += 1.0; // |pred| + |gt| pooled into one denominator term
            ce -= p[lab].max(1e-300).ln();
        }
    }
    Stats { inter, sums, ce }
}

pub fn dice_ce_value<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    w_dice: f64,
    w_ce: f64,
    eps: f64,
) -> f64 {
    let [b, k, d, h, w] = logits.d5();
    let n = (b * d * h * w) as f64;
    let st = gather_stats(logits, labels, k);
    // soft Dice over foreground classes only; background is class 0
    let fg = (k - 1).max(1) as f64;
    let mut dice = 0.0;
    for c in 1..k {
        dice += 2.0 * st.inter[c] / (st.sums[c] + eps);
    }
    dice /= fg;
    w_dice * (1.0 - dice) + w_ce * st.ce / n
}

/// Accumulates upstream * d(loss)/d(logits) into dx.
pub fn dice_ce_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    w_dice: f64,
    w_ce: f64,
    eps: f64,
    upstream: f64,
    dx: &mut Tensor<T>,
) {
    let [b, k, d, h, w] = logits.d5();
    let sp = d * h * w;
    let n = (b * sp) as f64;
    let fg = (k - 1).max(1) as f64;
    let st = gather_stats(logits, labels, k);
    // dL_dice/dp_c at one voxel: for c>=1,
    //   d/dp [ -2 I_c/(S_c+eps) ] / fg = -2 (1{lab=c}(S_c+eps) - I_c)/(S_c+eps)^2 / fg
    let mut p = vec![0.0; k];
    for bi in 0..b {
        for v in 0..sp {
            softmax_at(logits, bi, v, k, sp, &mut p);
            let lab = labels[bi * sp + v] as usize;
            let mut dldp = vec![0.0; k];
            for c in 1..k {
                let denom = st.sums[c] + eps;
                let hit = if lab == c { 1.0 } else { 0.0 };
                dldp[c] = -w_dice * 2.0 * (hit * denom - st.inter[c]) / (denom * denom) / fg;
            }
            // chain through softmax: dz_k = p_k (dldp_k - sum_c dldp_c p_c)
            let mut dot = 0.0;
            for c in 0..k {
                dot += dldp[c] * p[c];
            }
            let base = bi * k * sp + v;
            for c in 0..k {
                let hit = if lab == c { 1.0 } else { 0.0 };
                let gz = p[c] * (dldp[c] - dot) + w_ce * (p[c] - hit) / n;
                let slot = &mut dx.data_mut()[base + c * sp];
                *slot = T::of(slot.dbl() + upstream * gz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(k: usize, vals: Vec<f64>) -> Tensor<f64> {
        let n = vals.len() / k;
        assert_eq!(n, 1);
        Tensor::new(vec![1, k, 1, 1, 1], vals).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_k_cross_entropy() {
        // 4 classes, one voxel, all-zero logits: CE term is ln 4, p_lab = 1/4
        let t = vol(4, vec![0.0; 4]);
        let v = dice_ce_value(&t, &[2], 0.0, 1.0, 1e-5);
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_voxel_two_class_hand_value() {
        // logits (0,0), label 1: p1 = 0.5, dice_1 = 2*0.5/(0.5+1+eps),
        // loss = 0.7*(1 - 1/(1.5+eps)) + 0.3*ln 2
        let t = vol(2, vec![0.0, 0.0]);
        let eps = 1e-5;
        let expect = 0.7 * (1.0 - 2.0 * 0.5 / (1.5 + eps)) + 0.3 * 2.0f64.ln();
        let v = dice_ce_value(&t, &[1], 0.7, 0.3, eps);
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        assert!((v - 0.4413).abs() < 5e-4);
    }

    #[test]
    fn peaked_correct_prediction_is_near_zero() {
        let t = vol(2, vec![-20.0, 25.0]);
        let v = dice_ce_value(&t, &[1], 0.7, 0.3, 1e-5);
        assert!(v < 0.05, "loss {v}");
        assert!(v >= 0.0);
    }

    #[test]
    fn absent_foreground_class_floors_its_dice_term() {
        // class 2 never occurs and gets no mass: its dice term is 0, so the
        // loss floor is w_dice / fg even with a perfect class-1 prediction
        let t = vol(3, vec![-20.0, 25.0, -20.0]);
        let v = dice_ce_value(&t, &[1], 0.7, 0.3, 1e-5);
        assert!((v - 0.35).abs() < 1e-3, "loss {v}");
    }

    #[test]
    fn class_permutation_of_logits_and_labels_is_invariant() {
        // swapping two foreground classes consistently leaves the loss alone
        let logits = Tensor::new(
            vec![1, 3, 1, 1, 2],
            vec![0.3, -0.1, 1.2, 0.4, -0.5, 0.9],
        )
        .unwrap();
        let labels = [1u32, 2];
        let v1 = dice_ce_value(&logits, &labels, 0.7, 0.3, 1e-5);
        // swap classes 1 and 2 (channel planes and label names)
        let swapped = Tensor::new(
            vec![1, 3, 1, 1, 2],
            vec![0.3, -0.1, -0.5, 0.9, 1.2, 0.4],
        )
        .unwrap();
        let labels2 = [2u32, 1];
        let v2 = dice_ce_value(&swapped, &labels2, 0.7, 0.3, 1e-5);
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_as_correct_logit_grows() {
        let mut prev = f64::INFINITY;
        for step in 0..5 {
            let t = vol(2, vec![0.0, step as f64]);
            let v = dice_ce_value(&t, &[1], 0.7, 0.3, 1e-5);
            assert!(v < prev);
            prev = v;
        }
    }
}
