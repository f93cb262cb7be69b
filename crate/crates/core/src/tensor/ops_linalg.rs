//! Matrix products.

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, Ix2};

use super::graph::{Graph, Var};
use crate::scalar::Scalar;

pub(crate) fn as2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("2-D tensor expected")
}

/// `a @ b` on plain arrays.
pub fn mm<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
    out
}

impl<T: Scalar> Graph<T> {
    /// Product of two 2-D nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let value = mm(as2(self.value(a)), as2(self.value(b))).into_dyn();
        self.op(
            value,
            &[a, b],
            Box::new(|g, x, needs| {
                let g2 = as2(g);
                vec![
                    needs[0].then(|| mm(g2, as2(x[1]).t()).into_dyn()),
                    needs[1].then(|| mm(as2(x[0]).t(), g2).into_dyn()),
                ]
            }),
        )
    }
}
