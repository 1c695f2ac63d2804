use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Block, LayerNorm, Linear, Mlp};
use super::params::{Ctx, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::synthgen::vocab::{self, BOS, CLS, END, NO_HISTORY, WITH_HISTORY};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_feat: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub visual_blocks: usize,
    pub text_blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_feat: 32,
            num_patches: 16,
            patch_dim: 64,
            vocab_size: vocab::VOCAB_SIZE,
            max_len: 48,
            visual_blocks: 2,
            text_blocks: 2,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.d_feat,
            self.num_patches,
            self.patch_dim,
            self.max_len,
            self.mlp_ratio,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab_size <= vocab::name_token(vocab::NUM_CONDITIONS as u8 - 1) as usize {
            return Err(Error::Config(format!(
                "vocab_size {} does not cover the report grammar",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Decoder context rows: two patch grids, prompt, prior report, prefix.
    pub fn decoder_positions(&self) -> usize {
        2 * self.num_patches + 1 + 2 * self.max_len
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub readout: Linear,
}

/// Pure linear map into the shared feature space.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    pub w: ParamId,
}

/// Layer norm followed by a one-hidden-layer perceptron.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

impl Head {
    pub fn forward(&self, cx: &Ctx, y: Var) -> Result<Var> {
        self.mlp.forward(cx, self.ln.forward(cx, y)?)
    }
}

/// One shared head and two time-specific heads; one parameter set for
/// both modalities.
#[derive(Debug, Clone, Copy)]
pub struct DecompositionHeads {
    pub shared: Head,
    pub current: Head,
    pub prior: Head,
}

#[derive(Debug, Clone, Copy)]
pub struct Decomposed {
    pub current_shared: Var,
    pub current_specific: Var,
    pub prior_shared: Var,
    pub prior_specific: Var,
}

#[derive(Debug, Clone)]
pub struct ReportDecoder {
    pub visual_in: Linear,
    pub pos: ParamId,
    pub block: Block,
    pub ln_f: LayerNorm,
    pub out: Linear,
}

/// Longitudinal inputs to the decoder. `None` is the no-history scenario.
#[derive(Debug, Clone)]
pub struct PriorContext<'a> {
    pub patches: Var,
    pub report: &'a [u32],
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// One row per predicted position, width V.
    pub logits: Var,
    /// Teacher forcing: argmax per row. Greedy: the rollout, END included.
    pub tokens: Vec<u32>,
    /// Mean of the final hidden states of the predicted rows.
    pub hidden: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: ParamId,
    pub visual: VisualEncoder,
    pub projection: ProjectionHead,
    pub text: TextEncoder,
    pub heads: DecompositionHeads,
    pub decoder: ReportDecoder,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let d = config.d_model;
        let f = config.d_feat;
        let hidden = config.mlp_ratio * d;

        let embeddings = s.add_uniform("embeddings", &[config.vocab_size, d], d, rng);
        let visual = VisualEncoder {
            patch_proj: Linear::new(&mut s, "visual.patch_proj", config.patch_dim, d, rng),
            cls: s.add_uniform("visual.cls", &[d], d, rng),
            pos: s.add_uniform("visual.pos", &[config.num_patches + 1, d], d, rng),
            blocks: (0..config.visual_blocks)
                .map(|i| Block::new(&mut s, &format!("visual.block{i}"), d, hidden, rng))
                .collect(),
            ln_f: LayerNorm::new(&mut s, "visual.ln_f", d),
        };
        let projection = ProjectionHead {
            w: s.add_uniform("projection.w", &[d, f], d, rng),
        };
        let text = TextEncoder {
            pos: s.add_uniform("text.pos", &[config.max_len + 1, d], d, rng),
            blocks: (0..config.text_blocks)
                .map(|i| Block::new(&mut s, &format!("text.block{i}"), d, hidden, rng))
                .collect(),
            ln_f: LayerNorm::new(&mut s, "text.ln_f", d),
            readout: Linear::new(&mut s, "text.readout", d, f, rng),
        };
        let mut head = |name: &str| Head {
            ln: LayerNorm::new(&mut s, &format!("heads.{name}.ln"), f),
            mlp: Mlp::new(&mut s, &format!("heads.{name}"), f, f, rng),
        };
        let heads = DecompositionHeads {
            shared: head("shared"),
            current: head("current"),
            prior: head("prior"),
        };
        let decoder = ReportDecoder {
            visual_in: Linear::new(&mut s, "decoder.visual_in", d, d, rng),
            pos: s.add_uniform("decoder.pos", &[config.decoder_positions(), d], d, rng),
            block: Block::new(&mut s, "decoder.block", d, hidden, rng),
            ln_f: LayerNorm::new(&mut s, "decoder.ln_f", d),
            out: Linear::new(&mut s, "decoder.out", d, config.vocab_size, rng),
        };
        Ok(Self {
            config,
            store: s,
            embeddings,
            visual,
            projection,
            text,
            heads,
            decoder,
        })
    }

    /// Places a flat patch grid on the graph as a constant `[S, P*P*C]`.
    pub fn image_input(&self, cx: &Ctx, image: &[f64]) -> Result<Var> {
        let (s, p) = (self.config.num_patches, self.config.patch_dim);
        if image.len() != s * p {
            return Err(Error::InvalidShape {
                op: "encode_image",
                shape: vec![image.len()],
                reason: format!("expected {s} patches of {p} values"),
            });
        }
        cx.g.constant(&[s, p], image.to_vec())
    }

    /// Returns the patch features `[S, d_model]` and the CLS vector.
    pub fn encode_image(&self, cx: &Ctx, image: Var) -> Result<(Var, Var)> {
        let g = cx.g;
        let (s, p) = (self.config.num_patches, self.config.patch_dim);
        if g.shape(image) != [s, p] {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                left: g.shape(image),
                right: vec![s, p],
            });
        }
        let ve = &self.visual;
        let patches = ve.patch_proj.forward(cx, image)?;
        let mut h = g.add(g.concat(&[cx.p(ve.cls), patches])?, cx.p(ve.pos))?;
        for b in &ve.blocks {
            h = b.forward(cx, h)?;
        }
        let h = ve.ln_f.forward(cx, h)?;
        Ok((g.slice_rows(h, 1, s + 1)?, g.row(h, 0)?))
    }

    pub fn project_visual(&self, cx: &Ctx, cls: Var) -> Result<Var> {
        let d = self.config.d_model;
        if cx.g.shape(cls) != [d] {
            return Err(Error::ShapeMismatch {
                op: "project_visual",
                left: cx.g.shape(cls),
                right: vec![d],
            });
        }
        cx.g.matmul(cls, cx.p(self.projection.w))
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let v = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= v) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab: v }),
            None => Ok(()),
        }
    }

    /// Encodes report content (text after END and control tokens ignored);
    /// the readout is taken at the CLS position.
    pub fn encode_text(&self, cx: &Ctx, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let content = vocab::content_tokens(tokens);
        if content.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: content.len(),
                max: self.config.max_len,
            });
        }
        let g = cx.g;
        let te = &self.text;
        let mut ids = Vec::with_capacity(content.len() + 1);
        ids.push(CLS);
        ids.extend(&content);
        let emb = g.embedding_lookup(cx.p(self.embeddings), &ids)?;
        let pos = g.slice_rows(cx.p(te.pos), 0, ids.len())?;
        let mut h = g.add(emb, pos)?;
        for b in &te.blocks {
            h = b.forward(cx, h)?;
        }
        let cls = g.row(te.ln_f.forward(cx, h)?, 0)?;
        te.readout.forward(cx, cls)
    }

    fn check_feat(&self, cx: &Ctx, y: Var, op: &'static str) -> Result<()> {
        let f = self.config.d_feat;
        if cx.g.shape(y) != [f] {
            return Err(Error::ShapeMismatch {
                op,
                left: cx.g.shape(y),
                right: vec![f],
            });
        }
        Ok(())
    }

    pub fn decompose(&self, cx: &Ctx, current: Var, prior: Var) -> Result<Decomposed> {
        self.check_feat(cx, current, "decompose")?;
        self.check_feat(cx, prior, "decompose")?;
        let h = &self.heads;
        Ok(Decomposed {
            current_shared: h.shared.forward(cx, current)?,
            current_specific: h.current.forward(cx, current)?,
            prior_shared: h.shared.forward(cx, prior)?,
            prior_specific: h.prior.forward(cx, prior)?,
        })
    }

    /// Shared and current-specific features of one vector; used when no
    /// prior exists.
    pub fn decompose_current(&self, cx: &Ctx, current: Var) -> Result<(Var, Var)> {
        self.check_feat(cx, current, "decompose")?;
        Ok((
            self.heads.shared.forward(cx, current)?,
            self.heads.current.forward(cx, current)?,
        ))
    }

    /// Context rows in front of the generated prefix.
    fn decoder_context(&self, cx: &Ctx, patches: Var, prior: Option<&PriorContext>) -> Result<Var> {
        let g = cx.g;
        let dec = &self.decoder;
        let emb = cx.p(self.embeddings);
        let mut parts = vec![dec.visual_in.forward(cx, patches)?];
        let prompt = if prior.is_some() {
            WITH_HISTORY
        } else {
            NO_HISTORY
        };
        let mut ids = vec![prompt];
        if let Some(p) = prior {
            self.check_tokens(p.report)?;
            parts.push(dec.visual_in.forward(cx, p.patches)?);
            let content = vocab::content_tokens(p.report);
            if content.len() > self.config.max_len {
                return Err(Error::SequenceTooLong {
                    len: content.len(),
                    max: self.config.max_len,
                });
            }
            ids.extend(content);
        }
        parts.push(g.embedding_lookup(emb, &ids)?);
        g.concat(&parts)
    }

    /// Runs the causal block over `[context; BOS prefix]`, returning the
    /// final hidden rows from position `from` of the prefix onward.
    fn decoder_rows(&self, cx: &Ctx, context: Var, prefix: &[u32], from: usize) -> Result<Var> {
        let g = cx.g;
        let dec = &self.decoder;
        let c = g.shape(context)[0];
        let emb = g.embedding_lookup(cx.p(self.embeddings), prefix)?;
        let x = g.concat(&[context, emb])?;
        let n = c + prefix.len();
        let x = g.add(x, g.slice_rows(cx.p(dec.pos), 0, n)?)?;
        let h = dec.block.forward_rows(cx, x, c + from, true)?;
        dec.ln_f.forward(cx, h)
    }

    /// Teacher forcing: row `t` predicts `gold[t]` from `BOS gold[..t]`.
    /// Greedy (`gold = None`): argmax rollout until END or `max_len` rows.
    pub fn decode_report(
        &self,
        cx: &Ctx,
        patches: Var,
        prior: Option<&PriorContext>,
        gold: Option<&[u32]>,
        max_len: usize,
    ) -> Result<Decoded> {
        let g = cx.g;
        let max_len = max_len.min(self.config.max_len);
        let context = self.decoder_context(cx, patches, prior)?;
        let out = &self.decoder.out;
        match gold {
            Some(gold) => {
                self.check_tokens(gold)?;
                if gold.len() > max_len {
                    return Err(Error::SequenceTooLong {
                        len: gold.len(),
                        max: max_len,
                    });
                }
                if gold.is_empty() {
                    return Err(Error::InvalidShape {
                        op: "decode_report",
                        shape: vec![0],
                        reason: "gold report is empty".into(),
                    });
                }
                let mut prefix = vec![BOS];
                prefix.extend(&gold[..gold.len() - 1]);
                let h = self.decoder_rows(cx, context, &prefix, 0)?;
                let logits = out.forward(cx, h)?;
                let tokens = argmax_rows(&g.value(logits), self.config.vocab_size);
                Ok(Decoded {
                    logits,
                    tokens,
                    hidden: g.mean_pool(h)?,
                })
            }
            None => {
                let mut prefix = vec![BOS];
                let mut rows = Vec::new();
                let mut hidden = Vec::new();
                let mut tokens = Vec::new();
                while tokens.len() < max_len {
                    let h = self.decoder_rows(cx, context, &prefix, prefix.len() - 1)?;
                    let logits = out.forward(cx, h)?;
                    let t = argmax_rows(&g.value(logits), self.config.vocab_size)[0];
                    rows.push(logits);
                    hidden.push(h);
                    tokens.push(t);
                    prefix.push(t);
                    if t == END {
                        break;
                    }
                }
                Ok(Decoded {
                    logits: g.concat(&rows)?,
                    tokens,
                    hidden: g.mean_pool(g.concat(&hidden)?)?,
                })
            }
        }
    }

    /// Maps a decoder hidden summary into the text feature space.
    pub fn hidden_to_text(&self, cx: &Ctx, hidden: Var) -> Result<Var> {
        self.text.readout.forward(cx, hidden)
    }

    /// Parameters of one component, by name prefix.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }
}

/// First index of the maximum in each row; ties resolve to the lowest id.
pub fn argmax_rows(values: &[f64], width: usize) -> Vec<u32> {
    values
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}
