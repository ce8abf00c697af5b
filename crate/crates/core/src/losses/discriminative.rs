use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cloud::InstanceId;
use crate::error::{Error, Result};
use crate::isa::{Embedding, EMBEDDING_DIM};

use super::{check_len, DISC_REG_WEIGHT};

/// Pull (`delta_v`) and push (`delta_d`) hinge margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscMargins {
    pub delta_v: f64,
    pub delta_d: f64,
}

impl Default for DiscMargins {
    fn default() -> Self {
        Self { delta_v: 0.5, delta_d: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscLoss {
    pub var: f64,
    pub dist: f64,
    pub reg: f64,
    /// `var + dist + 0.001·reg`
    pub total: f64,
    /// Gradient of `total` per voxel; zero for voxels without an instance.
    pub grad: Vec<Embedding>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1(v: &Embedding) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn sub(a: &Embedding, b: &Embedding) -> Embedding {
    std::array::from_fn(|d| a[d] - b[d])
}

/// Discriminative embedding loss with L1 distances.
///
/// Voxels with instance id 0 do not take part. With a single instance the pair
/// term is empty and `dist = 0`.
pub fn discriminative_loss(
    embeddings: &[Embedding],
    instance_ids: &[InstanceId],
    margins: DiscMargins,
) -> Result<DiscLoss> {
    check_len("instance ids", embeddings.len(), instance_ids.len())?;
    if !(margins.delta_v > 0.0 && margins.delta_d > 0.0) {
        return Err(Error::InvalidConfig("discriminative margins must be > 0".into()));
    }
    let mut members: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
    for (i, &id) in instance_ids.iter().enumerate() {
        if id >= 1 {
            members.entry(id).or_default().push(i);
        }
    }
    if members.is_empty() {
        return Err(Error::NoInstances);
    }
    let groups: Vec<&Vec<usize>> = members.values().collect();
    let c = groups.len() as f64;

    let means: Vec<Embedding> = groups
        .iter()
        .map(|g| {
            let mut m = [0.0; EMBEDDING_DIM];
            for &i in g.iter() {
                for d in 0..EMBEDDING_DIM {
                    m[d] += embeddings[i][d];
                }
            }
            m.map(|x| x / g.len() as f64)
        })
        .collect();

    let mut grad = vec![[0.0; EMBEDDING_DIM]; embeddings.len()];
    // d(total)/d(mean_c), pushed to member voxels at the end
    let mut mean_grad = vec![[0.0; EMBEDDING_DIM]; groups.len()];

    let mut var = 0.0;
    for (ci, g) in groups.iter().enumerate() {
        let nc = g.len() as f64;
        let mut inner = 0.0;
        let mut weighted_signs = [0.0; EMBEDDING_DIM];
        for &i in g.iter() {
            let diff = sub(&embeddings[i], &means[ci]);
            let slack = (l1(&diff) - margins.delta_v).max(0.0);
            inner += slack * slack;
            if slack > 0.0 {
                let scale = 2.0 * slack / (c * nc);
                for d in 0..EMBEDDING_DIM {
                    let s = scale * sign(diff[d]);
                    grad[i][d] += s;
                    weighted_signs[d] += s;
                }
            }
        }
        var += inner / nc;
        // f_i − μ_c depends on every member through the mean
        for &i in g.iter() {
            for d in 0..EMBEDDING_DIM {
                grad[i][d] -= weighted_signs[d] / nc;
            }
        }
    }
    var /= c;

    let mut dist = 0.0;
    if groups.len() > 1 {
        let norm = c * (c - 1.0);
        for a in 0..groups.len() {
            for b in 0..groups.len() {
                if a == b {
                    continue;
                }
                let diff = sub(&means[a], &means[b]);
                let slack = (2.0 * margins.delta_d - l1(&diff)).max(0.0);
                dist += slack * slack;
                if slack > 0.0 {
                    // this ordered pair's contribution to d/dμ_a and d/dμ_b
                    for d in 0..EMBEDDING_DIM {
                        let s = 2.0 * slack * sign(diff[d]) / norm;
                        mean_grad[a][d] -= s;
                        mean_grad[b][d] += s;
                    }
                }
            }
        }
        dist /= norm;
    }

    let reg = means.iter().map(l1).sum::<f64>() / c;
    for (ci, m) in means.iter().enumerate() {
        for d in 0..EMBEDDING_DIM {
            mean_grad[ci][d] += DISC_REG_WEIGHT * sign(m[d]) / c;
        }
    }

    for (ci, g) in groups.iter().enumerate() {
        let nc = g.len() as f64;
        for &i in g.iter() {
            for d in 0..EMBEDDING_DIM {
                grad[i][d] += mean_grad[ci][d] / nc;
            }
        }
    }

    Ok(DiscLoss { var, dist, reg, total: var + dist + DISC_REG_WEIGHT * reg, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::{central_difference, random_disc_case, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inactive_hinges() {
        let codes = [[3.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 3.0, 0.0, 0.0], [-1.5, 0.0, 0.0, 0.0, 1.5]];
        let mut emb = Vec::new();
        let mut ids = Vec::new();
        for (c, code) in codes.iter().enumerate() {
            for _ in 0..4 {
                emb.push(*code);
                ids.push(c as u32 + 1);
            }
        }
        let r = discriminative_loss(&emb, &ids, DiscMargins::default()).unwrap();
        assert_eq!(r.var, 0.0);
        assert_eq!(r.dist, 0.0);
        assert!((r.reg - 3.0).abs() < 1e-15);
        assert!((r.total - 0.003).abs() < 1e-15);
    }

    #[test]
    fn single_instance_has_no_pair_term() {
        let emb = vec![[0.1, 0.2, 0.3, 0.4, 0.5], [0.0; 5]];
        let r = discriminative_loss(&emb, &[4, 4], DiscMargins::default()).unwrap();
        assert_eq!(r.dist, 0.0);
        assert_eq!(discriminative_loss(&emb, &[0, 0], DiscMargins::default()), Err(Error::NoInstances));
    }

    fn direct_formula(emb: &[Embedding], ids: &[u32], m: DiscMargins) -> (f64, f64, f64) {
        let mut inst: Vec<u32> = ids.iter().copied().filter(|&i| i > 0).collect();
        inst.sort();
        inst.dedup();
        let c = inst.len() as f64;
        let mean = |id: u32| {
            let pts: Vec<&Embedding> = emb.iter().zip(ids).filter(|(_, &i)| i == id).map(|(e, _)| e).collect();
            let mut mu = [0.0; 5];
            for p in &pts {
                for d in 0..5 {
                    mu[d] += p[d] / pts.len() as f64;
                }
            }
            (mu, pts)
        };
        let l1d = |a: &Embedding, b: &Embedding| (0..5).map(|d| (a[d] - b[d]).abs()).sum::<f64>();
        let mut var = 0.0;
        let mut reg = 0.0;
        for &id in &inst {
            let (mu, pts) = mean(id);
            var += pts.iter().map(|p| (l1d(p, &mu) - m.delta_v).max(0.0).powi(2)).sum::<f64>() / pts.len() as f64;
            reg += l1d(&mu, &[0.0; 5]);
        }
        let mut dist = 0.0;
        for &a in &inst {
            for &b in &inst {
                if a != b {
                    dist += (2.0 * m.delta_d - l1d(&mean(a).0, &mean(b).0)).max(0.0).powi(2);
                }
            }
        }
        let dist = if inst.len() > 1 { dist / (c * (c - 1.0)) } else { 0.0 };
        (var / c, dist, reg / c)
    }

    #[test]
    fn three_instances_match_formula_and_finite_differences() {
        let m = DiscMargins::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let (emb, ids) = random_disc_case(&mut rng, 3, m);
            let r = discriminative_loss(&emb, &ids, m).unwrap();
            let (var, dist, reg) = direct_formula(&emb, &ids, m);
            assert!((r.var - var).abs() < 1e-12);
            assert!((r.dist - dist).abs() < 1e-12);
            assert!((r.reg - reg).abs() < 1e-12);

            let flat: Vec<f64> = emb.iter().flatten().copied().collect();
            let fd = central_difference(&flat, 1e-5, |v| {
                let e: Vec<Embedding> = v.chunks(5).map(|c| c.try_into().unwrap()).collect();
                discriminative_loss(&e, &ids, m).unwrap().total
            });
            let g: Vec<f64> = r.grad.iter().flatten().copied().collect();
            assert!(relative_error(&g, &fd) < 1e-4);
        }
    }
}
