//! Pretrained CLIP ViT adapter.
//!
//! Loads a Hugging Face style `model.safetensors` plus the `tokenizer.json`
//! that sits next to it. Dense features are the patch tokens after the last
//! transformer block, passed through `post_layernorm` and
//! `visual_projection` (the class-token path with the pooling removed). The
//! image is fed at native resolution, zero-padded to a patch multiple; the
//! learned positional grid is bilinearly resized to the patch grid.
//!
//! Architecture sizes are read off the tensor shapes, with 64-dimensional
//! heads.

#[cfg(feature = "pretrained")]
use std::path::{Path, PathBuf};

use super::{DenseEmbedding, EncoderSpec, TextEmbedding, VisionLanguageEncoder};
use crate::error::{LdpError, Result};
use crate::image::Image;

#[cfg(feature = "pretrained")]
const HEAD_DIM: usize = 64;
#[cfg(feature = "pretrained")]
const MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
#[cfg(feature = "pretrained")]
const STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Clone, Debug, PartialEq)]
pub struct ClipConfig {
    pub vision_width: usize,
    pub vision_layers: usize,
    pub patch: usize,
    pub grid: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub context: usize,
    pub embed_dim: usize,
}

pub struct ClipEncoder {
    spec: EncoderSpec,
    #[cfg_attr(not(feature = "pretrained"), allow(dead_code))]
    config: ClipConfig,
    #[cfg(feature = "pretrained")]
    model: imp::Model,
}

impl ClipEncoder {
    pub fn config(&self) -> &ClipConfig {
        &self.config
    }
}

#[cfg(feature = "pretrained")]
fn load_error(uri: &Path, message: impl Into<String>) -> LdpError {
    LdpError::Load {
        uri: uri.to_path_buf(),
        message: message.into(),
    }
}

#[cfg(not(feature = "pretrained"))]
impl ClipEncoder {
    pub fn load(spec: &EncoderSpec) -> Result<Self> {
        let _ = spec;
        Err(LdpError::Unsupported(
            "built without the `pretrained` feature".into(),
        ))
    }
}

#[cfg(not(feature = "pretrained"))]
impl VisionLanguageEncoder for ClipEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }
    fn encode_image_dense(&self, _image: &Image) -> Result<DenseEmbedding> {
        unreachable!("a ClipEncoder cannot be constructed without the pretrained feature")
    }
    fn encode_text(&self, _prompt: &str) -> Result<TextEmbedding> {
        unreachable!("a ClipEncoder cannot be constructed without the pretrained feature")
    }
}

#[cfg(feature = "pretrained")]
impl ClipEncoder {
    /// Reads weights from `spec.weights_uri` and the tokenizer from
    /// `tokenizer.json` in the same directory.
    pub fn load(spec: &EncoderSpec) -> Result<Self> {
        let uri: PathBuf = spec
            .weights_uri
            .clone()
            .ok_or_else(|| load_error(Path::new(""), "no weights path given (set LDP_WEIGHTS)"))?;
        let bytes = std::fs::read(&uri).map_err(|e| load_error(&uri, e.to_string()))?;
        let tok_path = uri.with_file_name("tokenizer.json");
        let tokenizer = tokenizers::Tokenizer::from_file(&tok_path)
            .map_err(|e| load_error(&tok_path, e.to_string()))?;
        let model = imp::Model::from_safetensors(&bytes, tokenizer).map_err(|m| load_error(&uri, m))?;
        let config = model.config.clone();
        let spec = EncoderSpec {
            kind: spec.kind,
            c: config.embed_dim,
            patch_size: config.patch,
            weights_uri: Some(uri),
        };
        Ok(Self {
            spec,
            config,
            model,
        })
    }
}

#[cfg(feature = "pretrained")]
impl VisionLanguageEncoder for ClipEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_image_dense(&self, image: &Image) -> Result<DenseEmbedding> {
        super::check_unit_image(image)?;
        let features = self.model.encode_image(image);
        Ok(DenseEmbedding {
            features,
            patch_size: self.config.patch,
        })
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let t = self.model.encode_text(prompt)?;
        Ok(TextEmbedding {
            t,
            prompt: super::canonical_prompt(prompt),
        })
    }
}

#[cfg(feature = "pretrained")]
mod imp {
    use std::collections::HashMap;

    use safetensors::{Dtype, SafeTensors};

    use super::*;

    struct Tensor {
        shape: Vec<usize>,
        data: Vec<f32>,
    }

    struct Linear {
        w: Vec<f32>,
        b: Option<Vec<f32>>,
        n_in: usize,
        n_out: usize,
    }

    struct LayerNorm {
        g: Vec<f32>,
        b: Vec<f32>,
    }

    struct Block {
        ln1: LayerNorm,
        q: Linear,
        k: Linear,
        v: Linear,
        out: Linear,
        ln2: LayerNorm,
        fc1: Linear,
        fc2: Linear,
    }

    pub(super) struct Model {
        pub config: ClipConfig,
        patch_w: Vec<f32>,
        class_emb: Vec<f32>,
        vis_pos: Vec<f32>,
        pre_ln: LayerNorm,
        vis_blocks: Vec<Block>,
        post_ln: LayerNorm,
        vis_proj: Linear,
        tok_emb: Vec<f32>,
        vocab: usize,
        txt_pos: Vec<f32>,
        txt_blocks: Vec<Block>,
        final_ln: LayerNorm,
        txt_proj: Linear,
        tokenizer: tokenizers::Tokenizer,
    }

    struct Store(HashMap<String, Tensor>);

    impl Store {
        fn take(&mut self, name: &str) -> std::result::Result<Tensor, String> {
            self.0.remove(name).ok_or_else(|| format!("missing tensor {name}"))
        }

        fn vec(&mut self, name: &str, len: usize) -> std::result::Result<Vec<f32>, String> {
            let t = self.take(name)?;
            if t.data.len() != len {
                return Err(format!("{name}: expected {len} values, found shape {:?}", t.shape));
            }
            Ok(t.data)
        }

        fn linear(&mut self, prefix: &str, bias: bool) -> std::result::Result<Linear, String> {
            let w = self.take(&format!("{prefix}.weight"))?;
            if w.shape.len() != 2 {
                return Err(format!("{prefix}.weight is not a matrix"));
            }
            let (n_out, n_in) = (w.shape[0], w.shape[1]);
            let b = if bias {
                Some(self.vec(&format!("{prefix}.bias"), n_out)?)
            } else {
                None
            };
            Ok(Linear {
                w: w.data,
                b,
                n_in,
                n_out,
            })
        }

        fn ln(&mut self, prefix: &str, width: usize) -> std::result::Result<LayerNorm, String> {
            Ok(LayerNorm {
                g: self.vec(&format!("{prefix}.weight"), width)?,
                b: self.vec(&format!("{prefix}.bias"), width)?,
            })
        }

        fn blocks(&mut self, prefix: &str, width: usize) -> std::result::Result<Vec<Block>, String> {
            let mut out = Vec::new();
            while self.0.contains_key(&format!("{prefix}.{}.layer_norm1.weight", out.len())) {
                let p = format!("{prefix}.{}", out.len());
                out.push(Block {
                    ln1: self.ln(&format!("{p}.layer_norm1"), width)?,
                    q: self.linear(&format!("{p}.self_attn.q_proj"), true)?,
                    k: self.linear(&format!("{p}.self_attn.k_proj"), true)?,
                    v: self.linear(&format!("{p}.self_attn.v_proj"), true)?,
                    out: self.linear(&format!("{p}.self_attn.out_proj"), true)?,
                    ln2: self.ln(&format!("{p}.layer_norm2"), width)?,
                    fc1: self.linear(&format!("{p}.mlp.fc1"), true)?,
                    fc2: self.linear(&format!("{p}.mlp.fc2"), true)?,
                });
            }
            if out.is_empty() {
                return Err(format!("no transformer blocks under {prefix}"));
            }
            Ok(out)
        }
    }

    fn to_f32(view: &safetensors::tensor::TensorView<'_>) -> std::result::Result<Vec<f32>, String> {
        let raw = view.data();
        Ok(match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            Dtype::BF16 => raw
                .chunks_exact(2)
                .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            other => return Err(format!("unsupported dtype {other:?}")),
        })
    }

    impl Linear {
        /// `x` is `rows × n_in`; returns `rows × n_out`.
        fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
            let mut y = vec![0.0f32; rows * self.n_out];
            if let Some(b) = &self.b {
                for r in 0..rows {
                    y[r * self.n_out..(r + 1) * self.n_out].copy_from_slice(b);
                }
            }
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    self.n_in,
                    self.n_out,
                    1.0,
                    x.as_ptr(),
                    self.n_in as isize,
                    1,
                    self.w.as_ptr(),
                    1,
                    self.n_in as isize,
                    1.0,
                    y.as_mut_ptr(),
                    self.n_out as isize,
                    1,
                );
            }
            y
        }
    }

    impl LayerNorm {
        fn apply(&self, x: &[f32]) -> Vec<f32> {
            let w = self.g.len();
            let mut out = vec![0.0f32; x.len()];
            for (row, o) in x.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                let mean = row.iter().sum::<f32>() / w as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / w as f32;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for i in 0..w {
                    o[i] = (row[i] - mean) * inv * self.g[i] + self.b[i];
                }
            }
            out
        }
    }

    fn quick_gelu(x: f32) -> f32 {
        x / (1.0 + (-1.702 * x).exp())
    }

    impl Block {
        fn apply(&self, x: &mut [f32], tokens: usize, causal: bool) {
            let width = self.q.n_in;
            let heads = (width / HEAD_DIM).max(1);
            let hd = width / heads;
            let h = self.ln1.apply(x);
            let q = self.q.apply(&h, tokens);
            let k = self.k.apply(&h, tokens);
            let v = self.v.apply(&h, tokens);
            let scale = 1.0 / (hd as f32).sqrt();
            let mut ctx = vec![0.0f32; tokens * width];
            let mut logits = vec![0.0f32; tokens];
            for head in 0..heads {
                let off = head * hd;
                for i in 0..tokens {
                    let qi = &q[i * width + off..i * width + off + hd];
                    let limit = if causal { i + 1 } else { tokens };
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..limit {
                        let kj = &k[j * width + off..j * width + off + hd];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                        logits[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for l in logits.iter_mut().take(limit) {
                        *l = (*l - max).exp();
                        z += *l;
                    }
                    let out = &mut ctx[i * width + off..i * width + off + hd];
                    for j in 0..limit {
                        let p = logits[j] / z;
                        let vj = &v[j * width + off..j * width + off + hd];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let attn = self.out.apply(&ctx, tokens);
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
            let h = self.ln2.apply(x);
            let mut m = self.fc1.apply(&h, tokens);
            m.iter_mut().for_each(|v| *v = quick_gelu(*v));
            let m = self.fc2.apply(&m, tokens);
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        }
    }

    /// Bilinear resize (half-pixel centers) of a `g × g × width` grid.
    fn resize_grid(src: &[f32], g: usize, width: usize, hs: usize, ws: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; hs * ws * width];
        let coord = |i: usize, n_out: usize| -> (usize, usize, f32) {
            let s = ((i as f32 + 0.5) * g as f32 / n_out as f32 - 0.5).clamp(0.0, (g - 1) as f32);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(g - 1);
            (i0, i1, s - i0 as f32)
        };
        for y in 0..hs {
            let (y0, y1, fy) = coord(y, hs);
            for x in 0..ws {
                let (x0, x1, fx) = coord(x, ws);
                let o = &mut out[(y * ws + x) * width..(y * ws + x + 1) * width];
                for (wgt, yy, xx) in [
                    ((1.0 - fy) * (1.0 - fx), y0, x0),
                    ((1.0 - fy) * fx, y0, x1),
                    (fy * (1.0 - fx), y1, x0),
                    (fy * fx, y1, x1),
                ] {
                    let s = &src[(yy * g + xx) * width..(yy * g + xx + 1) * width];
                    for (a, b) in o.iter_mut().zip(s) {
                        *a += wgt * b;
                    }
                }
            }
        }
        out
    }

    fn unit_f64(v: &[f32]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        crate::vl_encoder::normalize_in_place(&mut out);
        out
    }

    impl Model {
        pub fn from_safetensors(
            bytes: &[u8],
            tokenizer: tokenizers::Tokenizer,
        ) -> std::result::Result<Self, String> {
            let st = SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;
            let mut map = HashMap::new();
            for (name, view) in st.tensors() {
                let data = to_f32(&view)?;
                map.insert(
                    name,
                    Tensor {
                        shape: view.shape().to_vec(),
                        data,
                    },
                );
            }
            let mut s = Store(map);

            let pw = s.take("vision_model.embeddings.patch_embedding.weight")?;
            if pw.shape.len() != 4 || pw.shape[1] != 3 || pw.shape[2] != pw.shape[3] {
                return Err(format!("patch embedding has shape {:?}", pw.shape));
            }
            let (vw, patch) = (pw.shape[0], pw.shape[2]);
            let vis_pos = s.take("vision_model.embeddings.position_embedding.weight")?;
            let n_pos = vis_pos.shape[0];
            let grid = ((n_pos - 1) as f64).sqrt().round() as usize;
            if grid * grid + 1 != n_pos {
                return Err(format!("{n_pos} vision positions do not form a square grid"));
            }
            let class_emb = s.vec("vision_model.embeddings.class_embedding", vw)?;
            let pre_ln = s.ln("vision_model.pre_layrnorm", vw)?;
            let vis_blocks = s.blocks("vision_model.encoder.layers", vw)?;
            let post_ln = s.ln("vision_model.post_layernorm", vw)?;
            let vis_proj = s.linear("visual_projection", false)?;

            let tok = s.take("text_model.embeddings.token_embedding.weight")?;
            let (vocab, tw) = (tok.shape[0], tok.shape[1]);
            let txt_pos = s.take("text_model.embeddings.position_embedding.weight")?;
            let context = txt_pos.shape[0];
            let txt_blocks = s.blocks("text_model.encoder.layers", tw)?;
            let final_ln = s.ln("text_model.final_layer_norm", tw)?;
            let txt_proj = s.linear("text_projection", false)?;
            if txt_proj.n_out != vis_proj.n_out {
                return Err("text and visual projections differ in size".into());
            }
            let config = ClipConfig {
                vision_width: vw,
                vision_layers: vis_blocks.len(),
                patch,
                grid,
                text_width: tw,
                text_layers: txt_blocks.len(),
                context,
                embed_dim: vis_proj.n_out,
            };
            Ok(Self {
                config,
                patch_w: pw.data,
                class_emb,
                vis_pos: vis_pos.data,
                pre_ln,
                vis_blocks,
                post_ln,
                vis_proj,
                tok_emb: tok.data,
                vocab,
                txt_pos: txt_pos.data,
                txt_blocks,
                final_ln,
                txt_proj,
                tokenizer,
            })
        }

        pub fn encode_image(&self, image: &Image) -> Image {
            let cfg = &self.config;
            let (p, vw) = (cfg.patch, cfg.vision_width);
            let hs = image.height().div_ceil(p);
            let ws = image.width().div_ceil(p);
            let cells = hs * ws;
            let k = 3 * p * p;
            let mut patches = vec![0.0f32; cells * k];
            for i in 0..hs {
                for j in 0..ws {
                    let row = &mut patches[(i * ws + j) * k..(i * ws + j + 1) * k];
                    for c in 0..3 {
                        for ky in 0..p {
                            for kx in 0..p {
                                let (y, x) = (i * p + ky, j * p + kx);
                                if y < image.height() && x < image.width() {
                                    let v = image.get(y, x, c) as f32;
                                    row[(c * p + ky) * p + kx] = (v - MEAN[c]) / STD[c];
                                }
                            }
                        }
                    }
                }
            }
            let embed = Linear {
                w: self.patch_w.clone(),
                b: None,
                n_in: k,
                n_out: vw,
            };
            let emb = embed.apply(&patches, cells);
            let pos = resize_grid(&self.vis_pos[vw..], cfg.grid, vw, hs, ws);
            let tokens = cells + 1;
            let mut x = vec![0.0f32; tokens * vw];
            for d in 0..vw {
                x[d] = self.class_emb[d] + self.vis_pos[d];
            }
            for t in 0..cells {
                for d in 0..vw {
                    x[(t + 1) * vw + d] = emb[t * vw + d] + pos[t * vw + d];
                }
            }
            let mut x = self.pre_ln.apply(&x);
            for b in &self.vis_blocks {
                b.apply(&mut x, tokens, false);
            }
            let x = self.post_ln.apply(&x);
            let proj = self.vis_proj.apply(&x[vw..], cells);
            let e = cfg.embed_dim;
            let mut data = Vec::with_capacity(cells * e);
            for t in 0..cells {
                data.extend(unit_f64(&proj[t * e..(t + 1) * e]));
            }
            Image::new(hs, ws, e, data).expect("grid size")
        }

        pub fn encode_text(&self, prompt: &str) -> Result<Vec<f64>> {
            let enc = self
                .tokenizer
                .encode(super::super::canonical_prompt(prompt), true)
                .map_err(|e| LdpError::domain(format!("tokenizer failed: {e}")))?;
            let mut ids: Vec<usize> = enc.get_ids().iter().map(|&i| i as usize).collect();
            if ids.is_empty() {
                return Err(LdpError::domain("prompt tokenized to nothing"));
            }
            ids.truncate(self.config.context);
            if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
                return Err(LdpError::domain(format!("token id {bad} outside the vocabulary")));
            }
            let tw = self.config.text_width;
            let n = ids.len();
            let mut x = vec![0.0f32; n * tw];
            for (t, &id) in ids.iter().enumerate() {
                for d in 0..tw {
                    x[t * tw + d] = self.tok_emb[id * tw + d] + self.txt_pos[t * tw + d];
                }
            }
            for b in &self.txt_blocks {
                b.apply(&mut x, n, true);
            }
            let x = self.final_ln.apply(&x);
            // The end-of-text token closes the sequence.
            let last = &x[(n - 1) * tw..n * tw];
            Ok(unit_f64(&self.txt_proj.apply(last, 1)))
        }
    }
}
