use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::nn::Tensor;
use crate::rng::Rng;

/// Role of a parameter; decides weight-decay eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Gate,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter collection. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    hollow: bool,
}

/// How a new parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Xavier/Glorot uniform with the given fans.
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that records shapes without allocating values.
    pub fn shapes_only() -> Self {
        Self {
            hollow: true,
            ..Self::default()
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
        rng: &mut Rng,
    ) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = if self.hollow {
            Tensor::hollow(shape)
        } else {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Normal(std) => {
                    use gaussian::normal;
                    (0..n).map(|_| std * normal(rng)).collect()
                }
            };
            Tensor::new(shape.to_vec(), data).expect("init matches shape")
        };
        let grad = if self.hollow {
            Tensor::hollow(shape)
        } else {
            Tensor::zeros(shape)
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
            kind,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Marks every parameter whose name matches one of `patterns` as
    /// frozen and every other parameter as trainable.
    pub fn apply_freeze(&mut self, patterns: &[String]) {
        for p in &mut self.params {
            p.trainable = !patterns.iter().any(|pat| glob_match(pat, &p.name));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Copies values from `other` for every name present in both stores.
    /// Shapes must agree. Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = other.value(id);
                if src.shape() != p.value.shape() {
                    return Err(invalid(format!(
                        "parameter {} has shape {:?}, source has {:?}",
                        p.name,
                        p.value.shape(),
                        src.shape()
                    )));
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// `*` matches any run of characters; everything else is literal.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.ends_with(part);
        } else {
            match rest.find(part) {
                Some(pos) => rest = &rest[pos + part.len()..],
                None => return false,
            }
        }
    }
    true
}

mod gaussian {
    use rand::Rng as _;

    /// Box-Muller standard normal draw.
    pub fn normal(rng: &mut crate::rng::Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn xavier_variance() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        for d in [64usize, 128] {
            let id = store.add(
                &format!("w{d}"),
                &[d, d],
                ParamKind::Weight,
                Init::Xavier { fan_in: d, fan_out: d },
                &mut r,
            );
            let v = store.value(id).data();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            let want = 2.0 / (2 * d) as f64;
            assert!((var - want).abs() / want < 0.25, "var {var} want {want}");
        }
    }

    #[test]
    fn globbing() {
        assert!(glob_match("gpt.block0.*", "gpt.block0.attn.wq"));
        assert!(!glob_match("gpt.block0.*", "gpt.block1.attn.wq"));
        assert!(glob_match("*.cross.*", "gpt.block1.cross.wq"));
        assert!(glob_match("gpt.tok_emb", "gpt.tok_emb"));
        assert!(!glob_match("gpt.tok_emb", "gpt.tok_emb2"));
        assert!(glob_match("*", "anything"));
    }

    #[test]
    fn freeze_marks_matches() {
        let mut s = ParamStore::new();
        let mut r = rng(0);
        s.add("a.w", &[2], ParamKind::Weight, Init::Zeros, &mut r);
        s.add("b.w", &[2], ParamKind::Weight, Init::Zeros, &mut r);
        s.apply_freeze(&["a.*".to_string()]);
        assert!(!s.get(s.id("a.w").unwrap()).trainable);
        assert!(s.get(s.id("b.w").unwrap()).trainable);
    }

    #[test]
    fn hollow_store_counts_without_allocating() {
        let mut s = ParamStore::shapes_only();
        let mut r = rng(0);
        s.add("w", &[1000, 1000], ParamKind::Weight, Init::Zeros, &mut r);
        assert_eq!(s.num_parameters(), 1_000_000);
        assert!(s.value(ParamId(0)).data().is_empty());
    }
}
