//! Finite-difference verification of the analytic loss gradients.
//!
//! The numerical side only ever evaluates loss values, so it is independent of
//! the analytic gradient code it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::isa::{Embedding, EMBEDDING_DIM};

use super::*;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 100;
/// Samples closer than this to a hinge or L1 kink are redrawn.
pub const KINK_CLEARANCE: f64 = 1e-3;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, with the denominator floored at 1e-8 so
/// that two vanishing gradients compare as equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(1e-8);
    diff / scale
}

fn l1(a: &Embedding, b: &Embedding) -> f64 {
    (0..EMBEDDING_DIM).map(|d| (a[d] - b[d]).abs()).sum()
}

fn clear_of_kinks(emb: &[Embedding], ids: &[u32], margins: DiscMargins) -> bool {
    let mut inst: Vec<u32> = ids.iter().copied().filter(|&i| i >= 1).collect();
    inst.sort_unstable();
    inst.dedup();
    let means: Vec<Embedding> = inst
        .iter()
        .map(|&id| {
            let members: Vec<&Embedding> = emb.iter().zip(ids).filter(|(_, &i)| i == id).map(|(e, _)| e).collect();
            std::array::from_fn(|d| members.iter().map(|e| e[d]).sum::<f64>() / members.len() as f64)
        })
        .collect();
    let far = |x: f64| x.abs() >= KINK_CLEARANCE;
    for (e, &id) in emb.iter().zip(ids) {
        if id == 0 {
            continue;
        }
        let mu = &means[inst.binary_search(&id).unwrap()];
        if !far(l1(e, mu) - margins.delta_v) || (0..EMBEDDING_DIM).any(|d| !far(e[d] - mu[d])) {
            return false;
        }
    }
    for (a, ma) in means.iter().enumerate() {
        if ma.iter().any(|&x| !far(x)) {
            return false;
        }
        for mb in &means[a + 1..] {
            if !far(2.0 * margins.delta_d - l1(ma, mb)) || (0..EMBEDDING_DIM).any(|d| !far(ma[d] - mb[d])) {
                return false;
            }
        }
    }
    true
}

/// Random embeddings for `instances` trees plus a few background voxels, with
/// both hinges partly active and every sample clear of non-differentiable points.
pub fn random_disc_case(rng: &mut ChaCha8Rng, instances: usize, margins: DiscMargins) -> (Vec<Embedding>, Vec<u32>) {
    loop {
        let mut emb = Vec::new();
        let mut ids = Vec::new();
        for c in 1..=instances as u32 {
            let center: Embedding = std::array::from_fn(|_| rng.random_range(-1.2..1.2));
            for _ in 0..rng.random_range(2..9) {
                emb.push(std::array::from_fn(|d| center[d] + rng.random_range(-0.3..0.3)));
                ids.push(c);
            }
        }
        for _ in 0..rng.random_range(0..4) {
            emb.push(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
            ids.push(0);
        }
        if clear_of_kinks(&emb, &ids, margins) {
            return (emb, ids);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub loss: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorCheck {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub gradients: Vec<GradcheckEntry>,
    pub anchors: Vec<AnchorCheck>,
    pub all_pass: bool,
}

fn entry(name: &str, instances: usize, errors: impl Iterator<Item = f64>) -> GradcheckEntry {
    let max = errors.fold(0.0, f64::max);
    GradcheckEntry {
        loss: name.to_string(),
        instances,
        max_relative_error: max,
        tolerance: GRAD_TOLERANCE,
        pass: max < GRAD_TOLERANCE,
    }
}

fn anchor(name: &str, expected: f64, actual: f64, tolerance: f64) -> AnchorCheck {
    AnchorCheck {
        name: name.to_string(),
        expected,
        actual,
        tolerance,
        pass: (expected - actual).abs() <= tolerance,
    }
}

fn mask_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(20..=200);
    let logits = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let gt = (0..n).map(|_| rng.random_bool(0.4)).collect();
    (logits, gt)
}

/// Runs `instances` random cases per loss and the closed-form anchors.
pub fn run_gradcheck(instances: usize, seed: u64) -> GradcheckReport {
    let h = FD_STEP;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gradients = Vec::new();

    let errs: Vec<f64> = (0..instances)
        .map(|_| {
            let (x, y) = mask_case(&mut rng);
            let g = bce_mask_loss(&x, &y).unwrap().grad;
            relative_error(&g, &central_difference(&x, h, |v| bce_mask_loss(v, &y).unwrap().loss))
        })
        .collect();
    gradients.push(entry("bce", instances, errs.into_iter()));

    let errs: Vec<f64> = (0..instances)
        .map(|_| {
            let (x, y) = mask_case(&mut rng);
            let g = dice_loss(&x, &y).unwrap().grad;
            relative_error(&g, &central_difference(&x, h, |v| dice_loss(v, &y).unwrap().loss))
        })
        .collect();
    gradients.push(entry("dice", instances, errs.into_iter()));

    let errs: Vec<f64> = (0..instances)
        .map(|_| {
            let m = rng.random_range(1..=50);
            let s: Vec<f64> = (0..m).map(|_| rng.random()).collect();
            let t: Vec<f64> = (0..m).map(|_| rng.random()).collect();
            let g = score_loss(&s, &t).unwrap().grad;
            relative_error(&g, &central_difference(&s, h, |v| score_loss(v, &t).unwrap().loss))
        })
        .collect();
    gradients.push(entry("score", instances, errs.into_iter()));

    let errs: Vec<f64> = (0..instances)
        .map(|_| {
            let n = rng.random_range(20..=200);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let g = binary_tree_loss(&p, &y).unwrap().grad;
            relative_error(&g, &central_difference(&p, h, |v| binary_tree_loss(v, &y).unwrap().loss))
        })
        .collect();
    gradients.push(entry("binary", instances, errs.into_iter()));

    let errs: Vec<f64> = (0..instances)
        .map(|_| {
            let n = rng.random_range(10..=100);
            let z: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let g = semantic_ce_loss(&z, &y).unwrap().grad;
            let flat: Vec<f64> = z.iter().flatten().copied().collect();
            let fd = central_difference(&flat, h, |v| {
                let zz: Vec<[f64; 3]> = v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                semantic_ce_loss(&zz, &y).unwrap().loss
            });
            relative_error(&g, &fd)
        })
        .collect();
    gradients.push(entry("sem", instances, errs.into_iter()));

    let margins = DiscMargins::default();
    let errs: Vec<f64> = (0..instances)
        .map(|_| {
            let c = rng.random_range(1..=4);
            let (emb, ids) = random_disc_case(&mut rng, c, margins);
            let g: Vec<f64> = discriminative_loss(&emb, &ids, margins).unwrap().grad.iter().flatten().copied().collect();
            let flat: Vec<f64> = emb.iter().flatten().copied().collect();
            let fd = central_difference(&flat, h, |v| {
                let e: Vec<Embedding> = v.chunks(EMBEDDING_DIM).map(|c| c.try_into().unwrap()).collect();
                discriminative_loss(&e, &ids, margins).unwrap().total
            });
            relative_error(&g, &fd)
        })
        .collect();
    gradients.push(entry("disc", instances, errs.into_iter()));

    let ln2 = std::f64::consts::LN_2;
    let gt: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let layer = LayerLosses { bce: 1.0, dice: 2.0, score: 4.0, sem: 10.0 };
    let heads = HeadLosses { binary: 1.0, disc_var: 2.0, disc_dist: 0.0, disc_reg: 0.0 };
    let layer_only = LayerLosses { sem: 0.0, ..layer };
    let anchors = vec![
        anchor("bce_uniform_logits", ln2, bce_mask_loss(&[0.0; 64], &gt).unwrap().loss, 1e-9),
        anchor("binary_uniform_probs", ln2, binary_tree_loss(&[0.5; 64], &gt).unwrap().loss, 1e-9),
        anchor("sem_uniform_logits", 3f64.ln(), semantic_ce_loss(&[[0.0; 3]; 8], &[0, 1, 2, 0, 1, 2, 0, 1]).unwrap().loss, 1e-9),
        anchor("instance_composite", 5.0, compose_losses(&[layer_only], HeadLosses::default()).unwrap().instance, 0.0),
        anchor("total_composite", 42.0, compose_losses(&[layer; 6], HeadLosses::default()).unwrap().total, 0.0),
        anchor("final_composite", 45.0, compose_losses(&[layer; 6], heads).unwrap().final_loss, 0.0),
    ];

    let all_pass = gradients.iter().all(|g| g.pass) && anchors.iter().all(|a| a.pass);
    GradcheckReport { seed, step: h, gradients, anchors, all_pass }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_of_quadratic() {
        let g = central_difference(&[1.0, -2.0], 1e-5, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn small_suite_passes() {
        let r = run_gradcheck(5, 1);
        assert!(r.all_pass, "{r:#?}");
        assert_eq!(r.gradients.len(), 6);
    }
}
