use crate::Scalar;

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<Scalar>,
    pub grad: Vec<Scalar>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<Scalar>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { value, grad, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn filled(shape: Vec<usize>, v: Scalar) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Read-only view of one named state entry (a parameter or a buffer).
#[derive(Debug, Clone, Copy)]
pub struct StateEntry<'a> {
    pub shape: &'a [usize],
    pub values: &'a [Scalar],
    /// `false` for buffers such as normalization running statistics.
    pub trainable: bool,
}
