//! The in-context classifier. Each support becomes the token
//! `[image embedding; label embedding]`, the query becomes
//! `[image embedding; 0]`, and a transformer whose supports never attend to
//! the query feeds the query's final state to a linear head over `n_max`
//! label slots.

use rand::Rng;
use serde::{Deserialize, Serialize};
use shotlab_tensor::{AttentionMask, Bound, ParamId, ParamStore, Piece, Scalar, Tape, Tensor, Var};

use crate::encoders::{images_to_tensor, Encoder};
use crate::episodes::EpisodeBatch;
use crate::error::{validation, Error, Result};
use crate::nn::{Dropout, Linear, Norm, TransformerBlock};
use crate::seed::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IclModelConfig {
    pub n_max: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for IclModelConfig {
    fn default() -> Self {
        IclModelConfig {
            n_max: 10,
            embed_dim: 64,
            heads: 8,
            layers: 4,
            feedforward_dim: 256,
            dropout: 0.1,
            precision: Precision::Single,
        }
    }
}

impl IclModelConfig {
    /// Width of the transformer tokens: image half plus label half.
    pub fn model_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_max < 1 || self.embed_dim < 1 || self.layers < 1 || self.feedforward_dim < 1 {
            return bad("n_max, embed_dim, layers and feedforward_dim must be positive");
        }
        if self.heads == 0 || self.model_dim() % self.heads != 0 {
            return bad("model_dim (2 * embed_dim) must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IclModel<T: Scalar> {
    pub config: IclModelConfig,
    pub params: ParamStore<T>,
    labels: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: Norm,
    head: Linear,
}

/// Graph handles produced by one forward pass.
pub struct IclOutput {
    /// `[batch, n_max]`.
    pub logits: Var,
    /// Token states entering the first block and leaving every block, each
    /// `[batch * (m + 1), model_dim]`.
    pub hidden: Vec<Var>,
}

impl<T: Scalar> IclModel<T> {
    pub fn new(config: &IclModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(init_seed, "icl-init", &[]);
        let mut store = ParamStore::new();
        let (d, md) = (config.embed_dim, config.model_dim());
        // a one-hot slot times an [n_max, d] matrix, initialised like a linear map
        let labels = store.add_uniform("label_embedding", &[config.n_max, d], config.n_max, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| {
                TransformerBlock::new(&mut store, &format!("layer{i}"), md, config.heads, config.feedforward_dim, &mut rng)
            })
            .collect();
        let norm = Norm::new(&mut store, "final_norm", md);
        let head = Linear::new(&mut store, "head", md, config.n_max, &mut rng);
        Ok(IclModel {
            config: config.clone(),
            params: store,
            labels,
            blocks,
            norm,
            head,
        })
    }

    pub fn label_table(&self) -> &Tensor<T> {
        self.params.get(self.labels)
    }

    fn check_slots(&self, slots: &[usize]) -> Result<()> {
        match slots.iter().find(|&&s| s >= self.config.n_max) {
            Some(s) => Err(validation(format!("slot {s} outside 0..{}", self.config.n_max))),
            None => Ok(()),
        }
    }

    /// Records the token construction and transformer for `batch` episodes of
    /// `m` supports. `images` holds `[batch * (m + 1), d]` image embeddings,
    /// per episode the supports then the query; `slots` holds the `batch * m`
    /// support slots.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: Var,
        slots: &[usize],
        batch: usize,
        m: usize,
        dropout_rng: Option<&mut R>,
    ) -> IclOutput {
        let d = self.config.embed_dim;
        let len = m + 1;
        assert_eq!(slots.len(), batch * m, "one slot per support");
        assert_eq!(tape.value(images).shape(), &[batch * len, d], "image embedding shape");
        let labels = tape.gather_rows(p.var(self.labels), slots);
        let mut pieces = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            pieces.push(Piece { src: images, src_row: b * len, rows: len, dst_row: b * len, dst_col: 0 });
            pieces.push(Piece { src: labels, src_row: b * m, rows: m, dst_row: b * len, dst_col: d });
        }
        let mut h = tape.stitch(batch * len, 2 * d, pieces);
        let mut hidden = vec![h];
        let mut dropout = match dropout_rng {
            Some(rng) if self.config.dropout > 0.0 => Dropout::On(self.config.dropout, rng),
            _ => Dropout::Off,
        };
        for block in &self.blocks {
            h = block.forward(tape, p, h, batch, len, AttentionMask::QueryLast, &mut dropout);
            hidden.push(h);
        }
        let queries: Vec<usize> = (0..batch).map(|b| b * len + m).collect();
        let q = tape.gather_rows(h, &queries);
        let q = self.norm.layer(tape, p, q);
        let logits = self.head.forward(tape, p, q);
        IclOutput { logits, hidden }
    }

    /// Encodes every image of `batch` and runs [`IclModel::forward`]. With
    /// `encoder_params` unset the encoder runs outside the graph.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        encoder: &Encoder<T>,
        encoder_params: Option<&Bound>,
        batch: &EpisodeBatch,
        dropout_rng: Option<&mut R>,
    ) -> Result<IclOutput> {
        let (b, m) = (batch.batch_size(), batch.m());
        if encoder.embed_dim() != self.config.embed_dim {
            return Err(validation(format!(
                "encoder embeds into {} dims, model expects {}",
                encoder.embed_dim(),
                self.config.embed_dim
            )));
        }
        let mut slots = Vec::with_capacity(b * m);
        for e in &batch.episodes {
            if e.n_max != self.config.n_max {
                return Err(validation(format!(
                    "episode uses {} slots, model has {}",
                    e.n_max, self.config.n_max
                )));
            }
            slots.extend(e.support_slots());
        }
        self.check_slots(&slots)?;
        let images = batch.episodes.iter().flat_map(|e| e.images().map(|i| &**i));
        let x = images_to_tensor::<T>(images, encoder.input_size())?;
        let emb = match encoder_params {
            Some(pe) => {
                let xv = tape.constant(x);
                encoder.forward(tape, pe, xv)
            }
            None => {
                let mut side = Tape::no_grad();
                let pe = side.bind(&encoder.params, false);
                let xv = side.constant(x);
                let out = encoder.forward(&mut side, &pe, xv);
                tape.constant(side.value(out).clone())
            }
        };
        Ok(self.forward(tape, p, emb, &slots, b, m, dropout_rng))
    }

    pub fn cast<U: Scalar>(&self) -> IclModel<U> {
        IclModel {
            config: self.config.clone(),
            params: self.params.cast(),
            labels: self.labels,
            blocks: self.blocks.clone(),
            norm: self.norm,
            head: self.head,
        }
    }
}

/// Label embeddings for `slots`, one row each.
pub fn embed_labels<T: Scalar>(slots: &[usize], model: &IclModel<T>) -> Result<Tensor<T>> {
    model.check_slots(slots)?;
    let table = model.label_table();
    let d = table.cols();
    let mut out = Vec::with_capacity(slots.len() * d);
    for &s in slots {
        out.extend_from_slice(table.row(s));
    }
    Ok(Tensor::new(vec![slots.len(), d], out))
}

/// The `(m + 1) x 2d` token matrix of one episode, supports first.
pub fn build_tokens<T: Scalar>(
    support_embeddings: &Tensor<T>,
    support_slots: &[usize],
    query_embedding: &[T],
    model: &IclModel<T>,
) -> Result<Tensor<T>> {
    let d = model.config.embed_dim;
    let m = support_slots.len();
    if m == 0 {
        return Err(validation("an episode needs at least one support"));
    }
    if support_embeddings.shape() != [m, d] || query_embedding.len() != d {
        return Err(validation(format!(
            "expected {m}x{d} support embeddings and a {d}-dim query, got {:?} and {}",
            support_embeddings.shape(),
            query_embedding.len()
        )));
    }
    let labels = embed_labels(support_slots, model)?;
    let mut out = Vec::with_capacity((m + 1) * 2 * d);
    for i in 0..m {
        out.extend_from_slice(support_embeddings.row(i));
        out.extend_from_slice(labels.row(i));
    }
    out.extend_from_slice(query_embedding);
    out.extend(std::iter::repeat(T::zero()).take(d));
    Ok(Tensor::new(vec![m + 1, 2 * d], out))
}

/// `mask[i][j]` is true when token `i` may attend to token `j`.
pub fn attention_mask(m: usize) -> Result<Vec<Vec<bool>>> {
    if m == 0 {
        return Err(validation("mask needs at least one support"));
    }
    let len = m + 1;
    Ok((0..len)
        .map(|i| {
            let vis = AttentionMask::QueryLast.visible(i, len);
            (0..len).map(|j| j < vis).collect()
        })
        .collect())
}

/// Query logits for every episode of `batch`, without dropout or gradients.
pub fn icl_forward<T: Scalar>(
    model: &IclModel<T>,
    batch: &EpisodeBatch,
    encoder: &Encoder<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let p = tape.bind(&model.params, false);
    let out = model.forward_batch::<crate::seed::Rng>(&mut tape, &p, encoder, None, batch, None)?;
    let logits = tape.value(out.logits).clone();
    if !logits.all_finite() {
        return Err(Error::Numeric("model produced non-finite logits".into()));
    }
    Ok(logits)
}

/// Highest-scoring active slot; ties go to the lowest slot.
pub fn predict<T: Scalar>(logits: &[T], active_slots: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for &s in active_slots {
        if s >= logits.len() {
            return Err(validation(format!("active slot {s} outside 0..{}", logits.len())));
        }
        best = match best {
            Some(b) if logits[b] > logits[s] || (logits[b] == logits[s] && b < s) => Some(b),
            _ => Some(s),
        };
    }
    best.ok_or_else(|| validation("no active slots"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(d: usize) -> IclModel<f64> {
        let cfg = IclModelConfig {
            embed_dim: d,
            heads: 2,
            layers: 1,
            feedforward_dim: 8,
            ..Default::default()
        };
        IclModel::new(&cfg, 1).unwrap()
    }

    #[test]
    fn label_lookup_matches_one_hot_product() {
        let model = tiny(4);
        let table = model.label_table();
        for slot in 0..10 {
            let row = embed_labels(&[slot], &model).unwrap();
            let oh = crate::episodes::one_hot(slot, 10).unwrap();
            for c in 0..4 {
                let prod: f64 = (0..10).map(|r| oh[r] * table.row(r)[c]).sum();
                assert_eq!(row.data()[c], prod);
            }
        }
        let two = embed_labels(&[3, 3], &model).unwrap();
        assert_eq!(two.row(0), two.row(1));
        assert_eq!(two.row(0), table.row(3));
        assert!(embed_labels(&[10], &model).is_err());
    }

    #[test]
    fn token_layout() {
        let mut model = tiny(2);
        let id = model.params.find("label_embedding").unwrap();
        let table = model.params.get_mut(id);
        table.data_mut()[2..4].copy_from_slice(&[3.0, 4.0]);
        let sup = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let t = build_tokens(&sup, &[1], &[0.5, -1.0], &model).unwrap();
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.row(1), &[0.5, -1.0, 0.0, 0.0]);

        let model = tiny(64);
        let sup = Tensor::zeros(&[50, 64]);
        let t = build_tokens(&sup, &[0; 50], &[0.0; 64], &model).unwrap();
        assert_eq!(t.shape(), &[51, 128]);
        assert!(build_tokens(&sup, &[0; 50], &[0.0; 3], &model).is_err());
    }

    #[test]
    fn mask_patterns() {
        assert_eq!(attention_mask(1).unwrap(), vec![vec![true, false], vec![true, true]]);
        assert_eq!(
            attention_mask(2).unwrap(),
            vec![vec![true, true, false], vec![true, true, false], vec![true, true, true]]
        );
        for m in 1..12 {
            let mask = attention_mask(m).unwrap();
            assert_eq!(mask.iter().filter(|row| row[m]).count(), 1);
            assert!(mask[m][m]);
        }
        assert!(attention_mask(0).is_err());
    }

    #[test]
    fn restricted_argmax() {
        let mut logits = vec![0.0f64; 10];
        logits[0] = 0.1;
        logits[1] = 5.0;
        logits[2] = -1.0;
        assert_eq!(predict(&logits, &[0, 1]).unwrap(), 1);
        logits[9] = 100.0;
        assert_eq!(predict(&logits, &[0, 1, 2]).unwrap(), 1);
        let mut tie = vec![0.0f64; 10];
        tie[2] = 3.0;
        tie[7] = 3.0;
        assert_eq!(predict(&tie, &[7, 2, 4]).unwrap(), 2);
        assert!(predict(&tie, &[]).is_err());
        assert!(predict(&tie, &[10]).is_err());
    }

    #[test]
    fn config_checks() {
        let cfg = IclModelConfig { embed_dim: 514, heads: 8, ..Default::default() };
        assert!(IclModel::<f32>::new(&cfg, 0).is_err());
        let cfg = IclModelConfig { embed_dim: 512, heads: 8, layers: 1, feedforward_dim: 4, ..Default::default() };
        assert_eq!(cfg.model_dim(), 1024);
        assert!(cfg.validate().is_ok());
    }
}
