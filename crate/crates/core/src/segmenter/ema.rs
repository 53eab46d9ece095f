use super::LinearSegmenter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean-teacher parameters tracking a student by exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<S> {
    pub model: LinearSegmenter<S>,
    pub momentum: f64,
}

impl<S: Scalar> TeacherState<S> {
    /// Teacher initialized as a copy of `student`.
    pub fn from_student(student: &LinearSegmenter<S>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("eums.ema_momentum", "must lie in [0, 1)"));
        }
        Ok(Self {
            model: student.clone(),
            momentum,
        })
    }

    /// `theta_t <- m theta_t + (1 - m) theta_s`, elementwise.
    pub fn update(&mut self, student: &LinearSegmenter<S>) -> Result<()> {
        if !self.model.params().same_shape(student.params()) {
            return Err(Error::Shape("teacher and student shapes differ".into()));
        }
        let m = S::cast(self.momentum);
        let keep = S::one() - m;
        for (t, &s) in self.model.params_mut().iter_mut().zip(student.params().iter()) {
            *t = m * *t + keep * s;
        }
        Ok(())
    }
}

pub fn ema_update<S: Scalar>(teacher: &TeacherState<S>, student: &LinearSegmenter<S>) -> Result<TeacherState<S>> {
    let mut next = teacher.clone();
    next.update(student)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassSpace;
    use crate::segmenter::Params;

    fn filled(v: f64) -> LinearSegmenter<f64> {
        let cs = ClassSpace::new(2, 1).unwrap();
        let mut p = Params::zeros(3, 2);
        p.iter_mut().for_each(|x| *x = v);
        LinearSegmenter::new(cs, p).unwrap()
    }

    #[test]
    fn single_step_from_zero() {
        let teacher = TeacherState::from_student(&filled(0.0), 0.99).unwrap();
        let next = ema_update(&teacher, &filled(1.0)).unwrap();
        assert!(next.model.params().iter().all(|&v| (v - 0.01).abs() < 1e-15));
    }

    #[test]
    fn equal_parameters_are_fixed() {
        let teacher = TeacherState::from_student(&filled(0.37), 0.99).unwrap();
        assert_eq!(ema_update(&teacher, &filled(0.37)).unwrap(), teacher);
    }

    #[test]
    fn gap_contracts_geometrically() {
        let student = filled(1.0);
        let mut teacher = TeacherState::from_student(&filled(-1.0), 0.9).unwrap();
        for n in 1..=20 {
            teacher.update(&student).unwrap();
            let expected = 2.0 * 0.9f64.powi(n);
            for &t in teacher.model.params().iter() {
                assert!(((1.0 - t) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut teacher = TeacherState::from_student(&filled(0.0), 0.5).unwrap();
        let other = LinearSegmenter::<f64>::base(ClassSpace::new(2, 1).unwrap(), 2);
        assert!(teacher.update(&other).is_err());
        assert!(TeacherState::from_student(&filled(0.0), 1.0).is_err());
    }
}
