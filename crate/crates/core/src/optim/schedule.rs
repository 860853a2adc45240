use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Piecewise-constant learning rate: `(start iteration, rate)` segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    segments: Vec<(usize, Real)>,
}

impl Schedule {
    pub fn new(segments: Vec<(usize, Real)>) -> Result<Self> {
        match segments.first() {
            None => return Err(Error::Config("schedule needs at least one segment".into())),
            Some(&(start, _)) if start != 0 => return Err(Error::Config("schedule must start at iteration 0".into())),
            _ => {}
        }
        if segments.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("schedule starts must be strictly increasing".into()));
        }
        if let Some(&(_, lr)) = segments.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Schedule { segments })
    }

    pub fn constant(lr: Real) -> Result<Self> {
        Self::new(vec![(0, lr)])
    }

    pub fn segments(&self) -> &[(usize, Real)] {
        &self.segments
    }

    /// Rate of the last segment starting at or before `iter`.
    pub fn lr_at(&self, iter: usize) -> Real {
        let idx = self.segments.partition_point(|&(start, _)| start <= iter);
        self.segments[idx.saturating_sub(1)].1
    }

    /// The same boundaries with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: Real) -> Result<Self> {
        Self::new(self.segments.iter().map(|&(s, lr)| (s, lr * factor)).collect())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// Parses `start:lr[,start:lr...]`.
    fn from_str(s: &str) -> Result<Self> {
        let segments = s
            .split(',')
            .map(|seg| {
                let (start, lr) = seg
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("schedule segment `{seg}` is not start:lr")))?;
                let start = start.trim().parse().map_err(|_| Error::Config(format!("bad start `{start}`")))?;
                let lr = lr.trim().parse().map_err(|_| Error::Config(format!("bad learning rate `{lr}`")))?;
                Ok((start, lr))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(segments)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (start, lr)) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{start}:{lr}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_svgd_schedule() {
        let s: Schedule = "0:0.01,1600:0.005,3600:0.001".parse().unwrap();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(1599), 0.01);
        assert_eq!(s.lr_at(1600), 0.005);
        assert_eq!(s.lr_at(3599), 0.005);
        assert_eq!(s.lr_at(3600), 0.001);
        assert_eq!(s.lr_at(5999), 0.001);
        assert_eq!(s.to_string(), "0:0.01,1600:0.005,3600:0.001");
    }

    #[test]
    fn invalid_schedules() {
        for bad in ["", "5:0.1", "0:0.1,0:0.2", "0:0.1,10:0.2,5:0.3", "0:-1", "0:0", "0-0.1", "0:abc"] {
            assert!(bad.parse::<Schedule>().is_err(), "{bad}");
        }
    }
}
