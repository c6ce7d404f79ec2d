//! Measurement containers: observations, feature tracks and map points.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

pub type TrackId = usize;
pub type FrameId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("track {track} has non-increasing frame ids")]
    Unordered { track: TrackId },
    #[error("track {track} has a non-finite observation in frame {frame}")]
    NonFinite { track: TrackId, frame: FrameId },
    #[error("track {track} has a duplicate id")]
    DuplicateTrack { track: TrackId },
}

/// A normalized image measurement of one track in one keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub track_id: TrackId,
    pub frame_id: FrameId,
    pub u: Vector2<f64>,
}

/// All observations of a single scene point, ordered by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub track_id: TrackId,
    observations: Vec<Observation>,
}

impl FeatureTrack {
    /// Sorts nothing: the observations must already be strictly increasing in frame id.
    pub fn new(track_id: TrackId, observations: Vec<Observation>) -> Result<Self, TrackError> {
        for w in observations.windows(2) {
            if w[1].frame_id <= w[0].frame_id {
                return Err(TrackError::Unordered { track: track_id });
            }
        }
        for o in &observations {
            if !o.u.iter().all(|v| v.is_finite()) {
                return Err(TrackError::NonFinite { track: track_id, frame: o.frame_id });
            }
        }
        let observations =
            observations.into_iter().map(|o| Observation { track_id, ..o }).collect();
        Ok(Self { track_id, observations })
    }

    pub fn from_points(track_id: TrackId, obs: impl IntoIterator<Item = (FrameId, Vector2<f64>)>) -> Result<Self, TrackError> {
        let observations =
            obs.into_iter().map(|(frame_id, u)| Observation { track_id, frame_id, u }).collect();
        Self::new(track_id, observations)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn in_frame(&self, frame: FrameId) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame_id)
            .ok()
            .map(|i| &self.observations[i])
    }

    /// Restriction to frames satisfying `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(FrameId) -> bool) -> FeatureTrack {
        FeatureTrack {
            track_id: self.track_id,
            observations: self.observations.iter().copied().filter(|o| keep(o.frame_id)).collect(),
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.observations.iter().map(|o| o.frame_id)
    }
}

/// A reconstructed scene point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub track_id: TrackId,
    pub x: Vector3<f64>,
}

/// A set of tracks keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    tracks: BTreeMap<TrackId, FeatureTrack>,
}

impl TrackSet {
    pub fn new(tracks: impl IntoIterator<Item = FeatureTrack>) -> Result<Self, TrackError> {
        let mut map = BTreeMap::new();
        for t in tracks {
            let id = t.track_id;
            if map.insert(id, t).is_some() {
                return Err(TrackError::DuplicateTrack { track: id });
            }
        }
        Ok(Self { tracks: map })
    }

    /// Groups loose observations into tracks.
    pub fn from_observations(obs: impl IntoIterator<Item = Observation>) -> Result<Self, TrackError> {
        let mut grouped: BTreeMap<TrackId, Vec<Observation>> = BTreeMap::new();
        for o in obs {
            grouped.entry(o.track_id).or_default().push(o);
        }
        let mut tracks = Vec::with_capacity(grouped.len());
        for (id, mut v) in grouped {
            v.sort_by_key(|o| o.frame_id);
            tracks.push(FeatureTrack::new(id, v)?);
        }
        Self::new(tracks)
    }

    pub fn get(&self, id: TrackId) -> Option<&FeatureTrack> {
        self.tracks.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureTrack> {
        self.tracks.values()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.tracks.keys().copied()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.tracks.values().flat_map(|t| t.observations.iter())
    }

    /// Highest frame id referenced, if any.
    pub fn max_frame(&self) -> Option<FrameId> {
        self.observations().map(|o| o.frame_id).max()
    }

    /// Correspondences `(track, u_j, u_k)` between two frames.
    pub fn shared(&self, j: FrameId, k: FrameId) -> Vec<(TrackId, Vector2<f64>, Vector2<f64>)> {
        self.tracks
            .values()
            .filter_map(|t| Some((t.track_id, t.in_frame(j)?.u, t.in_frame(k)?.u)))
            .collect()
    }

    /// Tracks restricted to frames in `keep`, dropping those left with fewer
    /// than `min_views` observations.
    pub fn restricted(&self, mut keep: impl FnMut(FrameId) -> bool, min_views: usize) -> TrackSet {
        TrackSet {
            tracks: self
                .tracks
                .values()
                .map(|t| t.filtered(&mut keep))
                .filter(|t| t.len() >= min_views)
                .map(|t| (t.track_id, t))
                .collect(),
        }
    }

    /// Sub-set with the given ids (unknown ids are skipped).
    pub fn subset(&self, ids: &[TrackId]) -> TrackSet {
        TrackSet {
            tracks: ids.iter().filter_map(|id| self.tracks.get(id).map(|t| (*id, t.clone()))).collect(),
        }
    }

    pub fn insert(&mut self, track: FeatureTrack) {
        self.tracks.insert(track.track_id, track);
    }

    pub fn remove(&mut self, id: TrackId) -> Option<FeatureTrack> {
        self.tracks.remove(&id)
    }

    /// Count of tracks observed in both frames.
    pub fn shared_count(&self, j: FrameId, k: FrameId) -> usize {
        self.tracks.values().filter(|t| t.in_frame(j).is_some() && t.in_frame(k).is_some()).count()
    }
}
