//! STFT and iSTFT as graph operations.

use std::rc::Rc;

use ndarray::{Array3, ArrayD, Ix3, IxDyn};

use super::graph::{Graph, Var};
use crate::dsp::Stft;
use crate::error::Result;
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    /// `[len] -> [2, T, F]`.
    pub fn stft(&mut self, x: Var, plan: Rc<Stft<T>>) -> Result<Var> {
        let len = self.value(x).len();
        let spec = plan.forward(self.value(x).as_slice().unwrap())?;
        Ok(self.op(
            spec.into_dyn(),
            &[x],
            Box::new(move |g, _, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let gx = plan.forward_adjoint(&g3, len);
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[len]), gx).unwrap())]
            }),
        ))
    }

    /// `[2, T, F] -> [out_len]`.
    pub fn istft(&mut self, spec: Var, plan: Rc<Stft<T>>, out_len: usize) -> Result<Var> {
        let s3: Array3<T> = self
            .value(spec)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("istft: [2, T, F] expected")
            .to_owned();
        let frames = s3.shape()[1];
        let wave = plan.inverse(&s3, out_len)?;
        Ok(self.op(
            ArrayD::from_shape_vec(IxDyn(&[out_len]), wave).unwrap(),
            &[spec],
            Box::new(move |g, _, _| {
                vec![Some(plan.inverse_adjoint(g.as_slice().unwrap(), frames).into_dyn())]
            }),
        ))
    }
}
