//! Plain-text parameter archive:
//!
//! ```text
//! #fuseqa-checkpoint 1
//! config {"layers":2,...}
//! relations 6
//! param embed.tokens
//! shape: 512 16
//! 0.01 -0.2 ...
//! ```
//!
//! Every parameter of the configured model appears exactly once. Values are
//! written in shortest round-trip form, so reload is bit-exact.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

use super::{FusionModel, ModelConfig, ModelError};

const MAGIC: &str = "#fuseqa-checkpoint 1";

pub fn to_checkpoint_text(model: &FusionModel) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str("config ");
    out.push_str(&serde_json::to_string(model.config()).expect("config serializes"));
    out.push('\n');
    out.push_str(&format!("relations {}\n", model.num_relations()));
    for p in model.params().iter() {
        out.push_str("param ");
        out.push_str(&p.name);
        out.push('\n');
        out.push_str(&p.tensor.to_text());
    }
    out
}

pub fn save_checkpoint(model: &FusionModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, to_checkpoint_text(model))
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

pub fn parse_checkpoint(text: &str) -> Result<FusionModel, ModelError> {
    let err = |line: usize, msg: String| ModelError::Checkpoint { line, msg };
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim_end()) != Some(MAGIC) {
        return Err(err(1, format!("expected header {MAGIC:?}")));
    }
    let config_json =
        lines.get(1).and_then(|l| l.strip_prefix("config ")).ok_or_else(|| err(2, "expected `config {...}`".into()))?;
    let config: ModelConfig = serde_json::from_str(config_json).map_err(|e| err(2, e.to_string()))?;
    let relations: usize = lines
        .get(2)
        .and_then(|l| l.strip_prefix("relations "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| err(3, "expected `relations <count>`".into()))?;
    let mut model = FusionModel::new(config, relations).map_err(|e| err(2, e.to_string()))?;
    let mut seen = vec![false; model.params().len()];
    let mut i = 3;
    while i < lines.len() {
        let line_no = i + 1;
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let name = lines[i].strip_prefix("param ").ok_or_else(|| err(line_no, "expected `param <name>`".into()))?;
        let id = model.params().id(name).ok_or_else(|| err(line_no, format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(err(line_no, format!("parameter {name:?} repeated")));
        }
        let body = lines.get(i + 1..i + 3).ok_or_else(|| err(line_no, format!("truncated parameter {name:?}")))?;
        let tensor = Tensor::parse(&body.join("\n")).map_err(|e| err(line_no + 1, e.to_string()))?;
        let slot = &mut model.params_mut().get_mut(id).tensor;
        if tensor.shape() != slot.shape() {
            return Err(err(
                line_no + 1,
                format!("parameter {name:?} has shape {:?}, expected {:?}", tensor.shape(), slot.shape()),
            ));
        }
        *slot = tensor;
        i += 3;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = &model.params().iter().nth(missing).expect("index in range").name;
        return Err(err(lines.len(), format!("missing parameter {name:?}")));
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FusionModel, ModelError> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reload_is_bit_exact() {
        let cfg = ModelConfig { d_lm: 4, d_gnn: 4, vocab_size: 10, max_seq_len: 6, ..ModelConfig::default() };
        let m = FusionModel::new(cfg, 3).unwrap();
        let text = to_checkpoint_text(&m);
        let back = parse_checkpoint(&text).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(to_checkpoint_text(&back), text);
    }

    #[test]
    fn rejects_missing_and_unknown_parameters() {
        let cfg = ModelConfig { d_lm: 4, d_gnn: 4, vocab_size: 10, max_seq_len: 6, ..ModelConfig::default() };
        let text = to_checkpoint_text(&FusionModel::new(cfg, 1).unwrap());
        let cut: Vec<&str> = text.lines().collect();
        let truncated = cut[..cut.len() - 3].join("\n");
        assert!(parse_checkpoint(&truncated).unwrap_err().to_string().contains("missing parameter"));
        let renamed = text.replacen("param head.b", "param head.c", 1);
        assert!(parse_checkpoint(&renamed).unwrap_err().to_string().contains("unknown parameter"));
        assert!(parse_checkpoint("nope").is_err());
    }
}
