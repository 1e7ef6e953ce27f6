//! Model checkpoints: a short text header followed by every parameter
//! tensor as little-endian f64, in `ModelState::parameters` order.
//!
//! ```text
//! sscl-checkpoint 1
//! task_id 3
//! observed_classes 6
//! input_dim 20
//! hidden 64 64
//! proj_dim 32
//! projector_bias true
//! tensor extractor.0.weight 20 64
//! ...
//! end
//! <raw tensor bytes>
//! ```

use std::path::Path;

use sscl_core::model::{Linear, ModelConfig, ModelState};
use sscl_core::numkit::Matrix;

use crate::error::{LabError, LabResult};
use crate::fsio;

const MAGIC: &str = "sscl-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task_id: usize,
    pub model: ModelState,
}

pub fn encode(task_id: usize, model: &ModelState) -> Vec<u8> {
    let cfg = model.config();
    let mut head = format!(
        "{MAGIC}\ntask_id {task_id}\nobserved_classes {}\ninput_dim {}\nhidden{}\nproj_dim {}\nprojector_bias {}\n",
        model.observed_classes(),
        cfg.input_dim,
        cfg.hidden.iter().map(|h| format!(" {h}")).collect::<String>(),
        cfg.proj_dim,
        cfg.projector_bias,
    );
    let params = model.parameters();
    for (name, p) in model.parameter_names().iter().zip(&params) {
        head.push_str(&format!("tensor {name} {} {}\n", p.rows(), p.cols()));
    }
    head.push_str("end\n");
    let mut out = head.into_bytes();
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> LabResult<Checkpoint> {
    let bad = |m: String| LabError::format(origin, m);
    let end = find_header_end(bytes).ok_or_else(|| bad("missing `end` line".into()))?;
    let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("first line must be `{MAGIC}`")));
    }
    let mut fields = std::collections::BTreeMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        if key == "tensor" {
            let [name, r, c] = rest[..] else { return Err(bad(format!("bad tensor line `{line}`"))) };
            let r: usize = r.parse().map_err(|_| bad(format!("bad rows in `{line}`")))?;
            let c: usize = c.parse().map_err(|_| bad(format!("bad cols in `{line}`")))?;
            tensors.push((name.to_string(), r, c));
        } else if key != "end" {
            fields.insert(key.to_string(), rest.join(" "));
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
    let num = |k: &str| -> LabResult<usize> { get(k)?.parse().map_err(|_| bad(format!("`{k}` is not a count"))) };
    let hidden = get("hidden")?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| bad("`hidden` must list counts".into())))
        .collect::<LabResult<Vec<usize>>>()?;
    let config = ModelConfig {
        input_dim: num("input_dim")?,
        hidden,
        proj_dim: num("proj_dim")?,
        projector_bias: get("projector_bias")?.parse().map_err(|_| bad("`projector_bias` must be true or false".into()))?,
    };

    let mut body = &bytes[end..];
    let mut mats = Vec::with_capacity(tensors.len());
    for (name, r, c) in &tensors {
        let n = r * c * 8;
        if body.len() < n {
            return Err(bad(format!("tensor {name} truncated")));
        }
        let data = body[..n].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        mats.push(Matrix::new(*r, *c, data)?);
        body = &body[n..];
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }
    let depth = config.hidden.len();
    if mats.len() != 2 * depth + 4 {
        return Err(bad(format!("expected {} tensors, found {}", 2 * depth + 4, mats.len())));
    }
    let mut it = mats.into_iter();
    let mut linear = || Linear { weights: it.next().expect("counted"), bias: it.next().expect("counted") };
    let extractor: Vec<Linear> = (0..depth).map(|_| linear()).collect();
    let classifier = linear();
    let projector = linear();
    let model = ModelState::from_parts(config, extractor, classifier, projector)?;
    if model.observed_classes() != num("observed_classes")? {
        return Err(bad("observed_classes disagrees with the classifier width".into()));
    }
    let expected_names = model.parameter_names();
    if tensors.iter().map(|t| &t.0).ne(expected_names.iter()) {
        return Err(bad("tensor names are out of order".into()));
    }
    Ok(Checkpoint { task_id: num("task_id")?, model })
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    const END: &[u8] = b"\nend\n";
    bytes.windows(END.len()).position(|w| w == END).map(|p| p + END.len())
}

pub fn save(path: &Path, task_id: usize, model: &ModelState) -> LabResult<()> {
    fsio::write_atomic(path, &encode(task_id, model))
}

pub fn load(path: &Path) -> LabResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes, path)
}
