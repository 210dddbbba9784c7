//! Weight container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "RZMD" | version u32
//! num_layers u32 | num_heads u32 | num_kv_heads u32 | head_dim u32
//! hidden_dim u32 | ffn_dim u32 | vocab_size u32 | max_context u32
//! positional u8 (0 rope, 1 alibi) | norm u8 (0 layernorm, 1 rmsnorm)
//! norm_eps f64 | rope_theta f64 (0 for alibi)
//! slope_count u32 | slopes f64 * slope_count
//! tensor_count u32
//! tensor_count * { name_len u32 | name utf-8 | rank u32 | dims u32 * rank | data f32 * prod(dims) }
//! ```
//!
//! Tensors are written in a fixed canonical order (see [`tensor_layout`]),
//! so `save(load(bytes)) == bytes`.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{Matrix, NormKind, NormParams};

use super::spec::{ModelSpec, Positional};
use super::{LayerWeights, Model};

pub const MODEL_MAGIC: [u8; 4] = *b"RZMD";
pub const MODEL_VERSION: u32 = 1;

/// Canonical tensor names and shapes for a spec.
pub fn tensor_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let (h, kv, f, v) = (spec.hidden_dim, spec.kv_dim(), spec.ffn_dim, spec.vocab_size);
    let mut out = vec![("tok_embed".to_string(), vec![v, h])];
    for l in 0..spec.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("attn_norm.weight"), vec![h]),
            (p("attn_norm.bias"), vec![h]),
            (p("wq"), vec![h, h]),
            (p("wk"), vec![h, kv]),
            (p("wv"), vec![h, kv]),
            (p("wo"), vec![h, h]),
            (p("ffn_norm.weight"), vec![h]),
            (p("ffn_norm.bias"), vec![h]),
            (p("w_gate"), vec![h, f]),
            (p("w_up"), vec![h, f]),
            (p("w_down"), vec![f, h]),
        ]);
    }
    out.extend([
        ("final_norm.weight".to_string(), vec![h]),
        ("final_norm.bias".to_string(), vec![h]),
        ("lm_head".to_string(), vec![h, v]),
    ]);
    out
}

fn norm_tensors(n: &NormParams<f32>) -> [Vec<f32>; 2] {
    [n.gamma().to_vec(), n.bias().to_vec()]
}

impl Model {
    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut data: Vec<Vec<f32>> = vec![self.embed.data().to_vec()];
        for layer in &self.layers {
            let [ag, ab] = norm_tensors(&layer.attn_norm);
            let [fg, fb] = norm_tensors(&layer.ffn_norm);
            data.extend([
                ag,
                ab,
                layer.wq.data().to_vec(),
                layer.wk.data().to_vec(),
                layer.wv.data().to_vec(),
                layer.wo.data().to_vec(),
                fg,
                fb,
                layer.w_gate.data().to_vec(),
                layer.w_up.data().to_vec(),
                layer.w_down.data().to_vec(),
            ]);
        }
        let [g, b] = norm_tensors(&self.final_norm);
        data.extend([g, b, self.lm_head.data().to_vec()]);
        tensor_layout(&self.spec)
            .into_iter()
            .zip(data)
            .map(|((name, dims), d)| (name, dims, d))
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = &self.spec;
        w.write_all(&MODEL_MAGIC)?;
        put_u32(w, MODEL_VERSION)?;
        for v in [
            s.num_layers,
            s.num_heads,
            s.num_kv_heads,
            s.head_dim,
            s.hidden_dim,
            s.ffn_dim,
            s.vocab_size,
            s.max_context,
        ] {
            put_u32(w, v as u32)?;
        }
        let (kind, theta, slopes): (u8, f64, &[f64]) = match &s.positional {
            Positional::Rope { theta_base } => (0, *theta_base, &[]),
            Positional::Alibi { slopes } => (1, 0.0, slopes),
        };
        w.write_all(&[kind, norm_code(s.norm_kind)])?;
        w.write_all(&s.norm_eps.to_le_bytes())?;
        w.write_all(&theta.to_le_bytes())?;
        put_u32(w, slopes.len() as u32)?;
        for x in slopes {
            w.write_all(&x.to_le_bytes())?;
        }
        let tensors = self.tensors();
        put_u32(w, tensors.len() as u32)?;
        for (name, dims, data) in tensors {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, dims.len() as u32)?;
            for d in dims {
                put_u32(w, d as u32)?;
            }
            for x in data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found: magic,
            });
        }
        let version = get_u32(r, "version")?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 8];
        for d in dims.iter_mut() {
            *d = get_u32(r, "header")? as usize;
        }
        let mut codes = [0u8; 2];
        read_exact(r, &mut codes, "header")?;
        let norm_eps = get_f64(r, "header")?;
        let theta = get_f64(r, "header")?;
        let n_slopes = get_u32(r, "header")? as usize;
        let slopes = (0..n_slopes).map(|_| get_f64(r, "alibi slopes")).collect::<Result<Vec<_>>>()?;
        let positional = match codes[0] {
            0 => Positional::Rope { theta_base: theta },
            1 => Positional::Alibi { slopes },
            c => return Err(Error::Parse(format!("unknown positional code {c}"))),
        };
        let norm_kind = match codes[1] {
            0 => NormKind::LayerNorm,
            1 => NormKind::RmsNorm,
            c => return Err(Error::Parse(format!("unknown norm code {c}"))),
        };
        let spec = ModelSpec {
            num_layers: dims[0],
            num_heads: dims[1],
            num_kv_heads: dims[2],
            head_dim: dims[3],
            hidden_dim: dims[4],
            ffn_dim: dims[5],
            vocab_size: dims[6],
            max_context: dims[7],
            positional,
            norm_kind,
            norm_eps,
        };
        spec.validate()?;

        let layout = tensor_layout(&spec);
        let expected: HashMap<&str, &[usize]> = layout.iter().map(|(n, d)| (n.as_str(), d.as_slice())).collect();
        let count = get_u32(r, "tensor count")? as usize;
        let mut found: HashMap<String, Vec<f32>> = HashMap::new();
        for _ in 0..count {
            let name_len = get_u32(r, "tensor name")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|e| Error::Parse(e.to_string()))?;
            let rank = get_u32(r, &name)? as usize;
            let shape = (0..rank).map(|_| get_u32(r, &name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let Some(&want) = expected.get(name.as_str()) else {
                return Err(Error::Parse(format!("unexpected tensor {name}")));
            };
            if shape != want {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: want.to_vec(),
                    found: shape,
                });
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(r, &mut raw, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            found.insert(name, data);
        }
        let mut take = |name: &str| found.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()));
        let mat = |data: Vec<f32>, rows: usize, cols: usize| Matrix::new(rows, cols, data);
        let norm = |g: Vec<f32>, b: Vec<f32>| NormParams::new(spec.norm_kind, g, b, spec.norm_eps);
        let (h, kv, f, v) = (spec.hidden_dim, spec.kv_dim(), spec.ffn_dim, spec.vocab_size);

        let embed = mat(take("tok_embed")?, v, h)?;
        let mut layers = Vec::with_capacity(spec.num_layers);
        for l in 0..spec.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerWeights {
                attn_norm: norm(take(&p("attn_norm.weight"))?, take(&p("attn_norm.bias"))?)?,
                wq: mat(take(&p("wq"))?, h, h)?,
                wk: mat(take(&p("wk"))?, h, kv)?,
                wv: mat(take(&p("wv"))?, h, kv)?,
                wo: mat(take(&p("wo"))?, h, h)?,
                ffn_norm: norm(take(&p("ffn_norm.weight"))?, take(&p("ffn_norm.bias"))?)?,
                w_gate: mat(take(&p("w_gate"))?, h, f)?,
                w_up: mat(take(&p("w_up"))?, h, f)?,
                w_down: mat(take(&p("w_down"))?, f, h)?,
            });
        }
        let final_norm = norm(take("final_norm.weight")?, take("final_norm.bias")?)?;
        let lm_head = mat(take("lm_head")?, h, v)?;
        Model::new(spec, embed, layers, final_norm, lm_head)
    }
}

fn norm_code(kind: NormKind) -> u8 {
    match kind {
        NormKind::LayerNorm => 0,
        NormKind::RmsNorm => 1,
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn get_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}
