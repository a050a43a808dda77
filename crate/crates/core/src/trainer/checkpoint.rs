use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::encoder::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

const MAGIC: &str = "cslab-checkpoint v1";

/// Parameters at some point of training, tagged with the model fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub step: u64,
    pub valid_loss: f64,
    pub fingerprint: String,
}

impl Checkpoint {
    pub fn new(params: Parameters, step: u64, valid_loss: f64, cfg: &ModelConfig) -> Self {
        Self {
            params,
            step,
            valid_loss,
            fingerprint: cfg.fingerprint(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_fingerprint(&self.fingerprint)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "fingerprint {}", self.fingerprint)?;
        writeln!(w, "step {}", self.step)?;
        // Debug formatting is the shortest string that round-trips exactly.
        writeln!(w, "valid_loss {:?}", self.valid_loss)?;
        writeln!(w, "tensors {}", self.params.len())?;
        for (name, t) in self.params.iter() {
            t.write_named(w, name)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, refusing it when `expected` is given and its
    /// fingerprint differs.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |d: &str| Error::format(path, d.to_string());
        let mut header = |key: &str| -> Result<String> {
            let mut line = String::new();
            r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\n');
            if key.is_empty() {
                return Ok(line.to_string());
            }
            line.strip_prefix(key)
                .and_then(|v| v.strip_prefix(' '))
                .map(String::from)
                .ok_or_else(|| bad(&format!("expected `{key}` line")))
        };
        let magic = header("")?;
        if magic != MAGIC {
            if magic.starts_with("cslab-checkpoint ") {
                return Err(Error::FormatVersionMismatch(format!("{}: {magic}", path.display())));
            }
            return Err(bad("not a checkpoint file"));
        }
        let fingerprint = header("fingerprint")?;
        let step = header("step")?.parse().map_err(|_| bad("bad step"))?;
        let valid_loss = header("valid_loss")?.parse().map_err(|_| bad("bad valid_loss"))?;
        let count: usize = header("tensors")?.parse().map_err(|_| bad("bad tensor count"))?;
        if let Some(cfg) = expected {
            let want = cfg.fingerprint();
            if want != fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: want,
                    found: fingerprint,
                });
            }
        }
        let cfg = ModelConfig::from_fingerprint(&fingerprint)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = Tensor::read_named(&mut r)
                .map_err(|e| bad(&e))?
                .ok_or_else(|| bad("truncated tensor list"))?;
            tensors.insert(name, t);
        }
        let params = Parameters::from_map(&cfg, tensors)?;
        Ok(Self {
            params,
            step,
            valid_loss,
            fingerprint,
        })
    }
}

/// Averages the `k` checkpoints with the lowest validation loss, ties going
/// to the earlier step. The result is independent of the input order.
pub fn average_checkpoints(ckpts: &[Checkpoint], k: usize) -> Result<Checkpoint> {
    if k == 0 || ckpts.len() < k {
        return Err(Error::TooFew {
            needed: k.max(1),
            have: ckpts.len(),
        });
    }
    let fp = &ckpts[0].fingerprint;
    if let Some(other) = ckpts.iter().find(|c| &c.fingerprint != fp) {
        return Err(Error::FingerprintMismatch {
            expected: fp.clone(),
            found: other.fingerprint.clone(),
        });
    }
    let mut order: Vec<&Checkpoint> = ckpts.iter().collect();
    order.sort_by(|a, b| a.valid_loss.total_cmp(&b.valid_loss).then(a.step.cmp(&b.step)));
    let chosen = &order[..k];

    // Running mean: exact for identical inputs and for symmetric pairs.
    let mut params = chosen[0].params.clone();
    for (i, c) in chosen.iter().enumerate().skip(1) {
        let n = (i + 1) as f64;
        for (name, acc) in params.iter_mut() {
            let x = c.params.get(name).expect("same fingerprint, same names");
            for (a, &v) in acc.data_mut().iter_mut().zip(x.data()) {
                *a += (v - *a) / n;
            }
        }
    }
    let valid_loss = chosen.iter().map(|c| c.valid_loss).sum::<f64>() / k as f64;
    let step = chosen.iter().map(|c| c.step).max().unwrap_or(0);
    Ok(Checkpoint {
        params,
        step,
        valid_loss,
        fingerprint: fp.clone(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::encoder::System;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            d_model: 4,
            ff_dim: 4,
            n_heads: 2,
            n_shared_blocks: 1,
            n_specific_blocks: 1,
            vocab_size: 5,
            system: System::MoeLae,
            disentangle: true,
        }
    }

    fn ckpt(seed: u64, step: u64, loss: f64) -> Checkpoint {
        Checkpoint::new(Parameters::init(&cfg(), seed).unwrap(), step, loss, &cfg())
    }

    #[test]
    fn identical_checkpoints_average_to_themselves() {
        let c = ckpt(1, 10, 0.5);
        let avg = average_checkpoints(&[c.clone(), c.clone(), c.clone()], 3).unwrap();
        assert_eq!(avg.params, c.params);
    }

    #[test]
    fn k_one_returns_the_best() {
        let list = [ckpt(1, 1, 3.0), ckpt(2, 2, 1.0), ckpt(3, 3, 2.0)];
        assert_eq!(average_checkpoints(&list, 1).unwrap().params, list[1].params);
        // equal losses: the earlier step wins
        let tie = [ckpt(4, 9, 1.0), ckpt(5, 4, 1.0)];
        assert_eq!(average_checkpoints(&tie, 1).unwrap().params, tie[1].params);
    }

    #[test]
    fn opposite_parameters_cancel() {
        let p = ckpt(1, 1, 1.0);
        let mut neg = p.clone();
        for (_, t) in neg.params.iter_mut() {
            *t = t.map(|x| -x);
        }
        let avg = average_checkpoints(&[p, neg], 2).unwrap();
        assert!(avg.params.iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            average_checkpoints(&[ckpt(1, 1, 1.0)], 2),
            Err(Error::TooFew { needed: 2, have: 1 })
        ));
        let mut other = ckpt(2, 2, 1.0);
        other.fingerprint = other.fingerprint.replace("d_model=4", "d_model=8");
        assert!(matches!(
            average_checkpoints(&[ckpt(1, 1, 1.0), other], 2),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn save_load_roundtrip_and_fingerprint_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = ckpt(7, 42, 0.1 + 0.2);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path, Some(&cfg())).unwrap(), c);
        let mut wrong = cfg();
        wrong.system = System::ConcatLae;
        assert!(matches!(
            Checkpoint::load(&path, Some(&wrong)),
            Err(Error::FingerprintMismatch { .. })
        ));
        std::fs::write(&path, "cslab-checkpoint v0\n").unwrap();
        assert!(matches!(Checkpoint::load(&path, None), Err(Error::FormatVersionMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        #[test]
        fn averaging_is_permutation_invariant(
            losses in prop::collection::vec(0u8..4, 2..6),
            k in 1usize..4,
            rot in 0usize..6,
        ) {
            let list: Vec<_> = losses.iter().enumerate()
                .map(|(i, &l)| ckpt(i as u64, i as u64, l as f64))
                .collect();
            let k = k.min(list.len());
            let mut shuffled = list.clone();
            shuffled.rotate_left(rot % list.len());
            shuffled.swap(0, list.len() - 1);
            let a = average_checkpoints(&list, k).unwrap();
            let b = average_checkpoints(&shuffled, k).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
