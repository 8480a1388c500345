//! Classifier-free guidance over the instruction, with norm rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::traj::{ActionChunk, InstructionTag, Observation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Guidance scale; 1 disables guidance.
    pub w: f64,
    pub rescale: bool,
    pub eps: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 1.0,
            rescale: true,
            eps: 1e-6,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) || !self.w.is_finite() {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {}", self.w)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("guidance eps must be positive".into()));
        }
        Ok(())
    }
}

/// `v_uncond + w * (v_cond - v_uncond)`.
pub fn cfg_mix(v_cond: &ActionChunk, v_uncond: &ActionChunk, w: f64) -> Result<ActionChunk> {
    v_cond.ensure_same_shape(v_uncond)?;
    Ok(ActionChunk {
        horizon: v_cond.horizon,
        dim: v_cond.dim,
        data: v_cond
            .data
            .iter()
            .zip(&v_uncond.data)
            .map(|(&c, &u)| u + w * (c - u))
            .collect(),
    })
}

/// Scales `v_cfg` so its Frobenius norm matches that of `v_cond`:
/// `v_cfg * ||v_cond|| / (||v_cfg|| + eps)`.
pub fn rescale(v_cfg: &ActionChunk, v_cond: &ActionChunk, eps: f64) -> Result<ActionChunk> {
    v_cfg.ensure_same_shape(v_cond)?;
    let factor = v_cond.frobenius_norm() / (v_cfg.frobenius_norm() + eps);
    Ok(v_cfg.scaled(factor))
}

/// Velocity under guidance. With `w == 1` this is exactly one conditional
/// evaluation; otherwise the conditional and null-instruction branches are
/// both evaluated and mixed.
pub fn guided_velocity<F: VelocityField + ?Sized>(
    model: &F,
    obs: &Observation,
    x: &ActionChunk,
    tau: f64,
    gcfg: &GuidanceConfig,
) -> Result<ActionChunk> {
    if gcfg.w == 1.0 {
        return model.velocity(obs, x, tau);
    }
    let v_cond = model.velocity(obs, x, tau)?;
    let v_uncond = model.velocity(&obs.with_instruction(InstructionTag::NullToken), x, tau)?;
    let mixed = cfg_mix(&v_cond, &v_uncond, gcfg.w)?;
    if gcfg.rescale {
        rescale(&mixed, &v_cond, gcfg.eps)
    } else {
        Ok(mixed)
    }
}

/// A velocity field evaluated under guidance, usable by either sampler.
pub struct Guided<'a, F: ?Sized> {
    pub field: &'a F,
    pub cfg: GuidanceConfig,
}

impl<F: VelocityField + ?Sized> VelocityField for Guided<'_, F> {
    fn chunk_shape(&self) -> (usize, usize) {
        self.field.chunk_shape()
    }

    fn velocity(&self, obs: &Observation, x: &ActionChunk, tau: f64) -> Result<ActionChunk> {
        guided_velocity(self.field, obs, x, tau, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CountingField;

    fn row(v: [f64; 3]) -> ActionChunk {
        ActionChunk::from_rows(&[v.to_vec()]).unwrap()
    }

    struct Branches {
        cond: ActionChunk,
        uncond: ActionChunk,
    }

    impl VelocityField for Branches {
        fn chunk_shape(&self) -> (usize, usize) {
            (1, 3)
        }
        fn velocity(&self, obs: &Observation, _: &ActionChunk, _: f64) -> Result<ActionChunk> {
            Ok(match obs.instruction {
                InstructionTag::NullToken => self.uncond.clone(),
                InstructionTag::Task(_) => self.cond.clone(),
            })
        }
    }

    fn obs() -> Observation {
        Observation {
            state: vec![],
            instruction: InstructionTag::Task(0),
            sim_time: 0.0,
        }
    }

    #[test]
    fn mix_identities() {
        let c = row([2.0, -1.0, 0.5]);
        let u = row([1.0, 4.0, -3.0]);
        assert_eq!(cfg_mix(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_mix(&c, &u, 0.0).unwrap(), u);
        assert_eq!(
            cfg_mix(&row([2.0, 0.0, 0.0]), &row([1.0, 0.0, 0.0]), 2.0).unwrap(),
            row([3.0, 0.0, 0.0])
        );
        assert!(cfg_mix(&c, &ActionChunk::zeros(2, 3), 1.0).is_err());
    }

    #[test]
    fn rescale_cases() {
        let eps = 1e-6;
        let out = rescale(&row([3.0, 0.0, 0.0]), &row([2.0, 0.0, 0.0]), eps).unwrap();
        let expected = 2.0 * (1.0 - eps / (3.0 + eps));
        assert!((out.data[0] - expected).abs() < 1e-15);
        assert!((out.data[0] - 2.0).abs() < 1e-5);

        let v = row([0.3, -0.4, 1.2]);
        let same = rescale(&v, &v, eps).unwrap();
        for (a, b) in same.data.iter().zip(&v.data) {
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }

        let zero = rescale(&ActionChunk::zeros(1, 3), &v, eps).unwrap();
        assert!(zero.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_scale_is_one_plain_evaluation() {
        let model = CountingField::new(Branches {
            cond: row([0.1, 0.2, 0.3]),
            uncond: row([9.0, 9.0, 9.0]),
        });
        let x = ActionChunk::zeros(1, 3);
        let g = GuidanceConfig::default();
        let v = guided_velocity(&model, &obs(), &x, 0.5, &g).unwrap();
        assert_eq!(v, row([0.1, 0.2, 0.3]));
        assert_eq!(model.calls(), 1);

        model.reset();
        let g3 = GuidanceConfig { w: 3.0, ..g };
        guided_velocity(&model, &obs(), &x, 0.5, &g3).unwrap();
        assert_eq!(model.calls(), 2);
    }

    #[test]
    fn zero_scale_without_rescale_is_unconditional() {
        let model = Branches {
            cond: row([0.1, 0.2, 0.3]),
            uncond: row([-1.0, 2.0, 0.0]),
        };
        let g = GuidanceConfig {
            w: 0.0,
            rescale: false,
            eps: 1e-6,
        };
        let v = guided_velocity(&model, &obs(), &ActionChunk::zeros(1, 3), 0.5, &g).unwrap();
        assert_eq!(v, model.uncond);
    }

    #[test]
    fn invalid_configs() {
        assert!(GuidanceConfig {
            w: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GuidanceConfig {
            eps: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GuidanceConfig::default().validate().is_ok());
    }
}
