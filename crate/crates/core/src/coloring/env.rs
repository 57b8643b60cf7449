use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tensor};

/// Coefficients of the shared per-turn reward
/// `α_d · n_discovery / (1 + α_o · n_overlap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    pub alpha_discovery: f64,
    pub alpha_overlap: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            alpha_discovery: 0.5,
            alpha_overlap: 1.7,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_discovery > 0.0 && self.alpha_overlap > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "reward coefficients must be positive, got {} and {}",
                self.alpha_discovery, self.alpha_overlap
            )))
        }
    }
}

pub fn reward(n_discovery: i64, n_overlap: i64, p: &RewardParams) -> Result<f64> {
    if n_discovery < 0 || n_overlap < 0 {
        return Err(Error::invalid(format!(
            "reward counts must be nonnegative, got ({n_discovery}, {n_overlap})"
        )));
    }
    Ok(p.alpha_discovery * n_discovery as f64 / (1.0 + p.alpha_overlap * n_overlap as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Owner {
    Unpainted,
    Agent0,
    Agent1,
}

impl Owner {
    fn agent(id: usize) -> Owner {
        if id == 0 {
            Owner::Agent0
        } else {
            Owner::Agent1
        }
    }
}

/// A row-major pixel coordinate `(row, col)`.
pub type Pixel = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ColoringState {
    pub image: Tensor,
    pub owner: Vec<Owner>,
    pub height: usize,
    pub width: usize,
    pub turn: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnOutcome {
    pub n_discovery: usize,
    pub n_overlap: usize,
    /// Shared by both agents.
    pub reward: f64,
    /// Pixels each agent selected this turn.
    pub selected: [usize; 2],
}

impl ColoringState {
    /// Fresh canvas over a `[C × H × W]` image.
    pub fn new(image: Tensor) -> Result<Self> {
        let [_, h, w] = *image.shape() else {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "coloring canvas must be [C × H × W]".into(),
            });
        };
        Ok(Self {
            image,
            owner: vec![Owner::Unpainted; h * w],
            height: h,
            width: w,
            turn: 0,
            done: false,
        })
    }

    pub fn painted(&self) -> usize {
        self.owner
            .iter()
            .filter(|&&o| o != Owner::Unpainted)
            .count()
    }

    pub fn max_turns(&self) -> usize {
        self.height * self.width
    }

    fn mask(&self, sel: &[Pixel]) -> Result<Vec<bool>> {
        let mut m = vec![false; self.height * self.width];
        for &(row, col) in sel {
            if row >= self.height || col >= self.width {
                return Err(Error::PixelOutOfBounds {
                    row,
                    col,
                    height: self.height,
                    width: self.width,
                });
            }
            m[row * self.width + col] = true;
        }
        Ok(m)
    }

    /// In-place turn on selection masks (`H·W` flags per agent).
    pub fn apply_masks(
        &mut self,
        sel0: &[bool],
        sel1: &[bool],
        params: &RewardParams,
        rng: &mut Rng,
    ) -> Result<TurnOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let n = self.height * self.width;
        if sel0.len() != n || sel1.len() != n {
            return Err(Error::shape(
                "coloring step",
                &[sel0.len(), sel1.len()],
                &[n, n],
            ));
        }
        let (mut discovery, mut overlap) = (0usize, 0usize);
        for i in 0..n {
            let (a, b) = (sel0[i], sel1[i]);
            if a && b {
                overlap += 1;
            }
            if (a || b) && self.owner[i] == Owner::Unpainted {
                discovery += 1;
                self.owner[i] = match (a, b) {
                    (true, true) => Owner::agent(rng.below(2)),
                    (true, false) => Owner::Agent0,
                    _ => Owner::Agent1,
                };
            }
        }
        self.turn += 1;
        self.done =
            self.owner.iter().all(|&o| o != Owner::Unpainted) || self.turn >= self.max_turns();
        Ok(TurnOutcome {
            n_discovery: discovery,
            n_overlap: overlap,
            reward: reward(discovery as i64, overlap as i64, params)?,
            selected: [
                sel0.iter().filter(|&&s| s).count(),
                sel1.iter().filter(|&&s| s).count(),
            ],
        })
    }

    /// Encodes the canvas for one agent: image channels, then the pixels it
    /// painted, then the pixels its partner painted.
    pub fn observation(&self, agent: usize) -> Result<Tensor> {
        if agent > 1 {
            return Err(Error::invalid(format!(
                "agent id must be 0 or 1, got {agent}"
            )));
        }
        let (own, other) = (Owner::agent(agent), Owner::agent(1 - agent));
        let c = self.image.shape()[0];
        let n = self.height * self.width;
        let mut data = Vec::with_capacity((c + 2) * n);
        data.extend_from_slice(self.image.data());
        data.extend(self.owner.iter().map(|&o| if o == own { 1.0 } else { 0.0 }));
        data.extend(
            self.owner
                .iter()
                .map(|&o| if o == other { 1.0 } else { 0.0 }),
        );
        Tensor::new(&[c + 2, self.height, self.width], data)
    }
}

/// One simultaneous turn; returns the outcome and the successor state.
pub fn step(
    state: &ColoringState,
    sel0: &[Pixel],
    sel1: &[Pixel],
    params: &RewardParams,
    rng: &mut Rng,
) -> Result<(TurnOutcome, ColoringState)> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    let (m0, m1) = (state.mask(sel0)?, state.mask(sel1)?);
    let mut next = state.clone();
    let out = next.apply_masks(&m0, &m1, params, rng)?;
    Ok((out, next))
}

pub fn observation(state: &ColoringState, agent: usize) -> Result<Tensor> {
    state.observation(agent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas(side: usize) -> ColoringState {
        ColoringState::new(Tensor::zeros(&[3, side, side])).unwrap()
    }

    #[test]
    fn reward_examples() {
        let p = RewardParams::default();
        assert_eq!(reward(0, 0, &p).unwrap(), 0.0);
        assert!((reward(10, 0, &p).unwrap() - 5.0).abs() < 1e-12);
        assert!((reward(10, 10, &p).unwrap() - 5.0 / 18.0).abs() < 1e-12);
        assert!(reward(-1, 0, &p).is_err());
    }

    #[test]
    fn two_by_two_turn() {
        let s = canvas(2);
        let mut rng = Rng::new(0);
        let (o, next) = step(
            &s,
            &[(0, 0), (0, 1)],
            &[(0, 1), (1, 1)],
            &RewardParams::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!((o.n_discovery, o.n_overlap), (3, 1));
        assert!((o.reward - 1.5 / 2.7).abs() < 1e-12);
        assert_eq!(next.owner[0], Owner::Agent0);
        assert_eq!(next.owner[3], Owner::Agent1);
        assert_ne!(next.owner[1], Owner::Unpainted);
        assert_eq!(next.owner[2], Owner::Unpainted);
        assert_eq!(s.painted(), 0, "input state untouched");
    }

    #[test]
    fn repainting_earns_nothing() {
        let mut rng = Rng::new(0);
        let p = RewardParams::default();
        let (_, s) = step(&canvas(2), &[(0, 0)], &[], &p, &mut rng).unwrap();
        let (o, _) = step(&s, &[(0, 0)], &[], &p, &mut rng).unwrap();
        assert_eq!((o.n_discovery, o.reward), (0, 0.0));
    }

    #[test]
    fn terminates_after_h_times_w_turns() {
        let mut rng = Rng::new(0);
        let p = RewardParams::default();
        let mut s = canvas(2);
        for t in 0..4 {
            assert!(!s.done);
            s = step(&s, &[(0, 0)], &[], &p, &mut rng).unwrap().1;
            assert_eq!(s.turn, t + 1);
        }
        assert!(s.done && s.painted() == 1);
        assert!(matches!(
            step(&s, &[], &[], &p, &mut rng),
            Err(Error::EpisodeDone)
        ));
    }

    #[test]
    fn full_canvas_terminates() {
        let mut rng = Rng::new(0);
        let all: Vec<Pixel> = (0..2).flat_map(|r| (0..2).map(move |c| (r, c))).collect();
        let (_, s) = step(&canvas(2), &all, &[], &RewardParams::default(), &mut rng).unwrap();
        assert!(s.done);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let err = step(
            &canvas(2),
            &[(2, 0)],
            &[],
            &RewardParams::default(),
            &mut Rng::new(0),
        );
        assert!(matches!(err, Err(Error::PixelOutOfBounds { row: 2, .. })));
    }

    #[test]
    fn observation_perspectives() {
        let s = canvas(2);
        let o = s.observation(0).unwrap();
        assert_eq!(o.shape(), &[5, 2, 2]);
        assert!(o.data()[12..].iter().all(|&v| v == 0.0));
        let (_, s) = step(
            &s,
            &[(0, 0)],
            &[],
            &RewardParams::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(s.observation(0).unwrap().at(&[3, 0, 0]), 1.0);
        assert_eq!(s.observation(1).unwrap().at(&[4, 0, 0]), 1.0);
        assert_eq!(s.observation(1).unwrap().at(&[3, 0, 0]), 0.0);
        assert!(s.observation(2).is_err());
    }

    #[test]
    fn contested_pixels_split_fairly() {
        let mut rng = Rng::new(5);
        let p = RewardParams::default();
        let mut zero = 0;
        for _ in 0..2000 {
            let (_, s) = step(&canvas(1), &[(0, 0)], &[(0, 0)], &p, &mut rng).unwrap();
            zero += (s.owner[0] == Owner::Agent0) as usize;
        }
        assert!((zero as f64 / 2000.0 - 0.5).abs() < 0.05, "{zero}");
    }
}
