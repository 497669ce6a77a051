use super::{NumError, Result, Tensor};

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Ordered collection of uniquely named parameters. Iteration follows
/// insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(NumError::DuplicateParam(name));
        }
        self.params.push(Parameter::new(name, value));
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Same parameters with every name's leading `from` replaced by `to`.
    pub fn renamed(&self, from: &str, to: &str) -> ParamSet {
        let params = self
            .params
            .iter()
            .map(|p| {
                let name = match p.name.strip_prefix(from) {
                    Some(rest) => format!("{to}{rest}"),
                    None => p.name.clone(),
                };
                Parameter {
                    name,
                    value: p.value.clone(),
                    grad: p.grad.clone(),
                }
            })
            .collect();
        ParamSet { params }
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = &'a Parameter;
    type IntoIter = std::slice::Iter<'a, Parameter>;
    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut set = ParamSet::new();
        set.insert("a.w", Tensor::zeros(&[2])).unwrap();
        assert_eq!(
            set.insert("a.w", Tensor::zeros(&[3])),
            Err(NumError::DuplicateParam("a.w".into()))
        );
        assert!(set.get("b").is_err());
    }

    #[test]
    fn grad_mirrors_value_shape() {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::ones(&[3, 4])).unwrap();
        let p = set.get("w").unwrap();
        assert_eq!(p.grad.shape(), p.value.shape());
    }

    #[test]
    fn renamed_swaps_prefix_only() {
        let mut set = ParamSet::new();
        set.insert("encoder.w", Tensor::ones(&[1])).unwrap();
        let r = set.renamed("encoder.", "target_encoder.");
        assert_eq!(r.iter().next().unwrap().name(), "target_encoder.w");
    }
}
