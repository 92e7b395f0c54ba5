//! Roadside occupancy: a detector model over ground-truth poses, then
//! spot association by overlap ratio.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use avp_msgbus::Envelope;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::geometry::{oriented_rect_overlap, OrientedRect, Pose2};
use crate::runtime::{Component, Outbox};
use crate::topics::{self, OccupancyMsg, PoseRecord};
use crate::world::{LotMap, SpotId};

pub const DEFAULT_THETA: f64 = 0.05;
pub const DEFAULT_RATE_HZ: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("miss probability for class {class:?} is {p}, outside [0, 1]")]
    BadProbability { class: String, p: f64 },
    #[error("position noise sigma {0} must be finite and non-negative")]
    BadSigma(f64),
    #[error("malformed --p-miss entry {0:?}, expected class=prob")]
    BadSpec(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectorModel {
    /// Per-class probability of missing a vehicle in a frame. Classes not
    /// listed are always detected.
    #[serde(default)]
    pub p_miss: BTreeMap<String, f64>,
    #[serde(default)]
    pub pos_noise_sigma_m: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DetectorModel {
    pub fn perfect(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        for (class, &p) in &self.p_miss {
            if !(0.0..=1.0).contains(&p) {
                return Err(DetectorError::BadProbability {
                    class: class.clone(),
                    p,
                });
            }
        }
        if !(self.pos_noise_sigma_m.is_finite() && self.pos_noise_sigma_m >= 0.0) {
            return Err(DetectorError::BadSigma(self.pos_noise_sigma_m));
        }
        Ok(())
    }

    pub fn miss_probability(&self, class: &str) -> f64 {
        self.p_miss.get(class).copied().unwrap_or(0.0)
    }

    /// Parses `sedan=0.1,van=0.3`.
    pub fn parse_p_miss(spec: &str) -> Result<BTreeMap<String, f64>, DetectorError> {
        spec.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let (class, p) = item
                    .split_once('=')
                    .ok_or_else(|| DetectorError::BadSpec(item.into()))?;
                let p: f64 = p.trim().parse().map_err(|_| DetectorError::BadSpec(item.into()))?;
                Ok((class.trim().to_string(), p))
            })
            .collect()
    }
}

/// Detected footprints for one frame. Each vehicle draws its miss decision
/// and its noise in input order from a stream keyed by (seed, frame_seq).
pub fn detect(poses: &[PoseRecord], model: &DetectorModel, frame_seq: u64) -> Vec<OrientedRect> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(frame_seq);
    let noise = Normal::new(0.0, model.pos_noise_sigma_m).expect("sigma validated");
    poses
        .iter()
        .filter_map(|p| {
            let missed = rng.gen::<f64>() < model.miss_probability(&p.class);
            let dx = noise.sample(&mut rng);
            let dy = noise.sample(&mut rng);
            if missed {
                return None;
            }
            Some(OrientedRect::footprint(
                &Pose2::new(p.x + dx, p.y + dy, p.yaw),
                p.len,
                p.wid,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyFrame {
    pub frame_seq: u64,
    pub timestamp_ns: i64,
    pub occupied: BTreeSet<SpotId>,
    pub available: BTreeSet<SpotId>,
}

/// Spots whose area is covered by some detection by more than `theta`.
pub fn occupied_spots(detections: &[OrientedRect], map: &LotMap, theta: f64) -> BTreeSet<SpotId> {
    map.spots()
        .iter()
        .filter(|s| {
            let area = s.rect.area();
            detections
                .iter()
                .any(|d| oriented_rect_overlap(d, &s.rect).area / area > theta)
        })
        .map(|s| s.id)
        .collect()
}

pub fn compute_occupancy(
    detections: &[OrientedRect],
    map: &LotMap,
    theta: f64,
    frame_seq: u64,
    timestamp_ns: i64,
) -> OccupancyFrame {
    let occupied = occupied_spots(detections, map, theta);
    let available = map.spot_ids().filter(|id| !occupied.contains(id)).collect();
    OccupancyFrame {
        frame_seq,
        timestamp_ns,
        occupied,
        available,
    }
}

#[derive(Debug, Clone)]
pub struct RsuConfig {
    pub rate_hz: f64,
    pub theta: f64,
    pub model: DetectorModel,
}

impl Default for RsuConfig {
    fn default() -> Self {
        Self {
            rate_hz: DEFAULT_RATE_HZ,
            theta: DEFAULT_THETA,
            model: DetectorModel::default(),
        }
    }
}

pub struct RsuComponent {
    map: Arc<LotMap>,
    config: RsuConfig,
    latest: Option<(u64, Vec<PoseRecord>)>,
    frame_seq: u64,
    warned_empty: bool,
}

impl RsuComponent {
    pub fn new(map: Arc<LotMap>, config: RsuConfig) -> Result<Self, DetectorError> {
        config.model.validate()?;
        Ok(Self {
            map,
            config,
            latest: None,
            frame_seq: 0,
            warned_empty: false,
        })
    }
}

impl Component for RsuComponent {
    fn name(&self) -> &str {
        topics::RSU_ID
    }

    fn subscriptions(&self) -> Vec<String> {
        vec![topics::POSES.into()]
    }

    fn tick_period_ns(&self) -> Option<i64> {
        Some((1e9 / self.config.rate_hz).round() as i64)
    }

    fn start(&mut self, _now_ns: i64, _out: &mut Outbox) {}

    fn on_message(&mut self, env: &Envelope, _now_ns: i64, _out: &mut Outbox) {
        match serde_json::from_value::<Vec<PoseRecord>>(env.payload.clone()) {
            Ok(poses) => self.latest = Some((env.seq, poses)),
            Err(e) => warn!(error = %e, "malformed pose snapshot"),
        }
    }

    fn on_tick(&mut self, now_ns: i64, out: &mut Outbox) {
        let Some((pose_seq, poses)) = &self.latest else {
            if !self.warned_empty {
                info!("no pose snapshot yet; holding occupancy output");
                self.warned_empty = true;
            }
            return;
        };
        self.frame_seq += 1;
        let detections = detect(poses, &self.config.model, self.frame_seq);
        let frame = compute_occupancy(&detections, &self.map, self.config.theta, self.frame_seq, now_ns);
        out.publish(
            topics::OCCUPANCY,
            OccupancyMsg {
                frame_seq: frame.frame_seq,
                pose_seq: *pose_seq,
                occupied: frame.occupied.into_iter().collect(),
                available: frame.available.into_iter().collect(),
            },
        );
    }
}
