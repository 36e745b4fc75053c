use crate::error::{Error, Result};
use crate::numeric::ParamStore;

/// Shadow parameters following `θ′ ← λ·θ′ + (1 − λ)·θ` after every
/// optimizer step. The shadow starts as a copy of the initial parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: ParamStore,
    pub lambda: f64,
    pub step: u64,
}

impl EmaState {
    pub fn new(params: &ParamStore, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("ema lambda must be in [0, 1], got {lambda}")));
        }
        Ok(EmaState {
            shadow: params.detached(),
            lambda,
            step: 0,
        })
    }

    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        ema_update(self, params)
    }
}

pub fn ema_update(ema: &mut EmaState, params: &ParamStore) -> Result<()> {
    if !ema.shadow.same_layout(params) {
        return Err(Error::shape("ema_update", "shadow does not match parameters"));
    }
    let lambda = ema.lambda;
    for id in params.ids() {
        let live = params.get(id).data();
        for (s, p) in ema.shadow.get_mut(id).data_mut().iter_mut().zip(live) {
            *s = lambda * *s + (1.0 - lambda) * p;
        }
    }
    ema.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{ParamId, Tensor};

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn degenerate_lambdas() {
        let mut p = scalar_store(1.0);
        let mut ema = EmaState::new(&p, 0.0).unwrap();
        p.get_mut(ParamId(0)).data_mut()[0] = 5.0;
        ema.update(&p).unwrap();
        assert_eq!(ema.shadow.get(ParamId(0)).data(), &[5.0]);

        let mut frozen = EmaState::new(&scalar_store(1.0), 1.0).unwrap();
        for v in [3.0, -2.0, 8.0] {
            frozen.update(&scalar_store(v)).unwrap();
        }
        assert_eq!(frozen.shadow.get(ParamId(0)).data(), &[1.0]);
        assert_eq!(frozen.step, 3);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let mut ema = EmaState::new(&scalar_store(1.0), 0.5).unwrap();
        let mut other = ParamStore::new();
        other.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(ema.update(&other).is_err());
        assert!(EmaState::new(&other, 1.5).is_err());
    }
}
