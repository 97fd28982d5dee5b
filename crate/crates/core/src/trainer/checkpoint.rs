//! Single-file binary checkpoints.
//!
//! Layout (little-endian): magic `DVSACKPT`, version u32, the resolved config
//! as text, alignment dims, both parameter stores, both optimizer states, the
//! soft-label state, the loop RNG state and the metric history. Strings and
//! tensors are length-prefixed.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{EpochMetrics, TrainConfig, TrainState};
use crate::alignment::{AlignmentDims, AlignmentParams};
use crate::data_io::ClassSplit;
use crate::diff_core::{OptimState, ParamStore, Tensor};
use crate::disambiguation::SoftLabelState;
use crate::error::{Error, Result};
use crate::mi_estimation::CriticParams;

const MAGIC: &[u8; 8] = b"DVSACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.len(t.rows());
        self.len(t.cols());
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn store(&mut self, s: &ParamStore) {
        self.len(s.len());
        for (name, t) in s.iter() {
            self.str(name);
            self.tensor(t);
        }
    }
    fn optim(&mut self, o: &OptimState) {
        self.f64(o.lr);
        self.f64(o.momentum);
        self.u64(o.step);
        self.len(o.velocity.len());
        for (name, t) in &o.velocity {
            self.str(name);
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format {
                offset: self.pos,
                msg: format!("checkpoint truncated while reading {what}"),
            }),
        }
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }
    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let rows = self.len(what)?;
        let cols = self.len(what)?;
        let raw = self.take(8 * rows * cols, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::matrix(rows, cols, data)
    }
    fn store(&mut self, what: &str) -> Result<ParamStore> {
        let n = self.len(what)?;
        let mut s = ParamStore::new();
        for _ in 0..n {
            let name = self.str(what)?;
            let t = self.tensor(&name)?;
            s.insert(&name, t)?;
        }
        Ok(s)
    }
    fn optim(&mut self, what: &str) -> Result<OptimState> {
        let mut o = OptimState::new(self.f64(what)?, self.f64(what)?)?;
        o.step = self.u64(what)?;
        for _ in 0..self.len(what)? {
            let name = self.str(what)?;
            let t = self.tensor(&name)?;
            o.velocity.insert(name, t);
        }
        Ok(o)
    }
}

impl Checkpoint {
    pub fn split(&self, num_classes: usize) -> Result<ClassSplit> {
        ClassSplit::new(num_classes, self.config.num_unseen_for(num_classes))
    }

    pub fn encode(&self) -> Vec<u8> {
        let st = &self.state;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_text());
        let d = st.align.dims;
        for v in [d.attributes, d.embed_dim, d.visual_dim, d.attn_dim] {
            w.len(v);
        }
        w.u32(u32::from(d.share_output_projection));
        w.len(st.critic.input_dim);
        w.len(st.critic.hidden);
        w.store(&st.align.store);
        w.store(&st.critic.store);
        w.optim(&st.align_opt);
        w.optim(&st.critic_opt);
        w.f64(st.labels.alpha);
        w.u64(st.labels.epoch);
        w.tensor(&st.labels.u);
        w.tensor(&st.labels.l_tilde);
        w.0.extend_from_slice(&st.rng.get_seed());
        w.u64(st.rng.get_stream());
        w.0.extend_from_slice(&st.rng.get_word_pos().to_le_bytes());
        w.len(st.history.len());
        for m in &st.history {
            w.u64(m.epoch);
            for v in [m.loss, m.l_vis, m.l_sem, m.l_ami, m.l_js, m.disamb_acc] {
                w.f64(v);
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let config = TrainConfig::parse(&r.str("config")?, Path::new("<checkpoint config>"))?;
        let dims = AlignmentDims {
            attributes: r.len("dims")?,
            embed_dim: r.len("dims")?,
            visual_dim: r.len("dims")?,
            attn_dim: r.len("dims")?,
            share_output_projection: r.u32("dims")? != 0,
        };
        let (input_dim, hidden) = (r.len("critic dims")?, r.len("critic dims")?);
        let align = AlignmentParams::from_store(dims, r.store("alignment parameters")?)?;
        let critic = CriticParams::from_store(input_dim, hidden, r.store("critic parameters")?)?;
        let align_opt = r.optim("alignment optimizer")?;
        let critic_opt = r.optim("critic optimizer")?;
        let alpha = r.f64("soft labels")?;
        let epoch = r.u64("soft labels")?;
        let labels = SoftLabelState {
            u: r.tensor("soft labels")?,
            l_tilde: r.tensor("soft labels")?,
            epoch,
            alpha,
        };
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64("rng stream")?);
        rng.set_word_pos(r.u128("rng position")?);
        let mut history = Vec::new();
        for _ in 0..r.len("history")? {
            let epoch = r.u64("history")?;
            let mut v = [0.0; 6];
            for x in v.iter_mut() {
                *x = r.f64("history")?;
            }
            let [loss, l_vis, l_sem, l_ami, l_js, disamb_acc] = v;
            history.push(EpochMetrics {
                epoch,
                loss,
                l_vis,
                l_sem,
                l_ami,
                l_js,
                disamb_acc,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Checkpoint {
            config,
            state: TrainState {
                align,
                critic,
                align_opt,
                critic_opt,
                labels,
                rng,
                history,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, SyntheticSpec};
    use crate::trainer::Trainer;

    #[test]
    fn encode_decode_round_trip() {
        let spec = SyntheticSpec {
            classes: 5,
            attributes: 6,
            visual_dim: 6,
            regions: 2,
            embed_dim: 3,
            n_per_class: 3,
            seed: 1,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            momentum: 0.5,
            mi_hidden_width: 4,
            ..Default::default()
        };
        let mut t = Trainer::new(&cfg, &d.semantic, &d.train).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        let bytes = t.checkpoint().encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.state.align, t.state.align);
        assert_eq!(back.state.rng, t.state.rng);
        assert_eq!(back.state.history, t.state.history);

        let err = Checkpoint::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
