//! Keypoint grouping schemes and the channel partition they induce.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};

/// Number of COCO-style body keypoints.
pub const NUM_KEYPOINTS: usize = 17;

/// COCO keypoint order.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// The built-in grouping schemes, named by their group count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupingKind {
    /// One group holding every keypoint (no channel decoupling).
    All,
    /// Head, arms, hips and knees, ankles.
    Four,
    /// Head, left arm, right arm, torso, left leg, right leg.
    Six,
    /// As `Six` with the torso split into shoulders and hips.
    Seven,
    /// One group per keypoint.
    Each,
}

impl GroupingKind {
    pub const ALL_KINDS: [GroupingKind; 5] = [Self::All, Self::Four, Self::Six, Self::Seven, Self::Each];

    pub fn groups(self) -> usize {
        match self {
            Self::All => 1,
            Self::Four => 4,
            Self::Six => 6,
            Self::Seven => 7,
            Self::Each => NUM_KEYPOINTS,
        }
    }

    pub fn from_groups(m: usize) -> Result<Self> {
        Self::ALL_KINDS.into_iter().find(|k| k.groups() == m).ok_or_else(|| {
            Error::Config(format!(
                "no built-in grouping scheme with {m} groups (expected 1, 4, 6, 7 or 17)"
            ))
        })
    }

    pub fn scheme(self) -> GroupingScheme {
        let groups: Vec<Vec<usize>> = match self {
            Self::All => vec![(0..NUM_KEYPOINTS).collect()],
            Self::Four => vec![
                vec![0, 1, 2, 3, 4],
                vec![5, 6, 7, 8, 9, 10],
                vec![11, 12, 13, 14],
                vec![15, 16],
            ],
            Self::Six => vec![
                vec![0, 1, 2, 3, 4],
                vec![7, 9],
                vec![8, 10],
                vec![5, 6, 11, 12],
                vec![13, 15],
                vec![14, 16],
            ],
            Self::Seven => vec![
                vec![0, 1, 2, 3, 4],
                vec![7, 9],
                vec![8, 10],
                vec![5, 6],
                vec![11, 12],
                vec![13, 15],
                vec![14, 16],
            ],
            Self::Each => (0..NUM_KEYPOINTS).map(|k| vec![k]).collect(),
        };
        GroupingScheme::new(groups).expect("built-in schemes are partitions")
    }
}

/// A partition of the keypoints into `M` non-empty groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupingScheme {
    groups: Vec<Vec<usize>>,
}

impl GroupingScheme {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = [false; NUM_KEYPOINTS];
        for (p, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Config(format!("keypoint group {p} is empty")));
            }
            for &k in g {
                if k >= NUM_KEYPOINTS {
                    return Err(Error::Config(format!("keypoint index {k} out of range")));
                }
                if seen[k] {
                    return Err(Error::Config(format!("keypoint {k} assigned to more than one group")));
                }
                seen[k] = true;
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("keypoint {k} belongs to no group")));
        }
        Ok(Self { groups })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, p: usize) -> &[usize] {
        &self.groups[p]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Which group a keypoint belongs to.
    pub fn group_of(&self, keypoint: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&keypoint))
    }

    /// Keypoint indices in head-output order: group 0's keypoints, then group 1's, ...
    pub fn flattened(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Channel ranges of each group for `channels` feature channels.
    pub fn channel_partition(&self, channels: usize) -> Result<ChannelPartition> {
        ChannelPartition::new(channels, self.num_groups())
    }
}

/// Contiguous split of `C` channels into `M` groups of `floor(C / M)`;
/// the trailing `C mod M` channels belong to no group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPartition {
    pub channels: usize,
    pub groups: usize,
    pub per_group: usize,
}

impl ChannelPartition {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels < groups {
            return Err(Error::Config(format!(
                "cannot split {channels} channels into {groups} groups (need C >= M >= 1)"
            )));
        }
        Ok(Self {
            channels,
            groups,
            per_group: channels / groups,
        })
    }

    pub fn range(&self, p: usize) -> Range<usize> {
        p * self.per_group..(p + 1) * self.per_group
    }

    pub fn omitted(&self) -> Range<usize> {
        self.groups * self.per_group..self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_schemes_partition_all_keypoints() {
        for kind in GroupingKind::ALL_KINDS {
            let s = kind.scheme();
            assert_eq!(s.num_groups(), kind.groups());
            let mut all = s.flattened();
            all.sort_unstable();
            assert_eq!(all, (0..NUM_KEYPOINTS).collect::<Vec<_>>());
        }
        assert_eq!(GroupingKind::Six.scheme().group_sizes(), vec![5, 2, 2, 4, 2, 2]);
    }

    #[test]
    fn partition_rejects_overlap_and_gaps() {
        let mut g: Vec<Vec<usize>> = (0..NUM_KEYPOINTS).map(|k| vec![k]).collect();
        g[1].push(0);
        assert!(GroupingScheme::new(g).is_err());
        let g: Vec<Vec<usize>> = (0..NUM_KEYPOINTS - 1).map(|k| vec![k]).collect();
        assert!(GroupingScheme::new(g).is_err());
        assert!(GroupingScheme::new(vec![(0..NUM_KEYPOINTS).collect(), vec![]]).is_err());
    }

    #[test]
    fn channel_split_matches_floor_division() {
        let p = ChannelPartition::new(2048, 6).unwrap();
        assert_eq!((p.per_group, p.omitted().len()), (341, 2));
        let p = ChannelPartition::new(50, 6).unwrap();
        assert_eq!((p.per_group, p.omitted()), (8, 48..50));
        let p = ChannelPartition::new(50, 1).unwrap();
        assert_eq!((p.per_group, p.omitted().len()), (50, 0));
        assert!(ChannelPartition::new(5, 6).is_err());
    }
}
