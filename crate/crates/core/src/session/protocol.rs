//! Experiment protocol model: modalities, condition labels, group assignment
//! and counterbalanced presentation orders.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SessionError;

/// Presentation modality of a viewing segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    OriginalArtwork,
    ImmersiveProjection,
    DisplayVideo,
}

impl Modality {
    pub const ALL: [Modality; 3] = [
        Modality::OriginalArtwork,
        Modality::ImmersiveProjection,
        Modality::DisplayVideo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::OriginalArtwork => "OriginalArtwork",
            Modality::ImmersiveProjection => "ImmersiveProjection",
            Modality::DisplayVideo => "DisplayVideo",
        }
    }

    /// Standing in front of the original, seated for interpretive content.
    pub fn posture(self) -> Posture {
        match self {
            Modality::OriginalArtwork => Posture::Standing,
            _ => Posture::Seated,
        }
    }

    pub fn is_interpretive(self) -> bool {
        self != Modality::OriginalArtwork
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SessionError::InvalidLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Posture {
    Standing,
    Seated,
}

impl Posture {
    pub fn as_str(self) -> &'static str {
        match self {
            Posture::Standing => "standing",
            Posture::Seated => "seated",
        }
    }
}

/// Modality plus block position. Posture is derived from the modality, so a
/// label can never carry an inconsistent posture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConditionLabel {
    modality: Modality,
    block: u8,
}

impl ConditionLabel {
    pub const MAX_BLOCK: u8 = 3;

    pub fn new(modality: Modality, block: u8) -> Result<Self, SessionError> {
        if !(1..=Self::MAX_BLOCK).contains(&block) {
            return Err(SessionError::InvalidLabel(format!(
                "block position {block} outside 1..={}",
                Self::MAX_BLOCK
            )));
        }
        Ok(Self { modality, block })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn block(&self) -> u8 {
        self.block
    }

    pub fn posture(&self) -> Posture {
        self.modality.posture()
    }
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.modality, self.block)
    }
}

impl FromStr for ConditionLabel {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, b) = s
            .split_once('/')
            .ok_or_else(|| SessionError::InvalidLabel(s.to_string()))?;
        let block = b
            .parse::<u8>()
            .map_err(|_| SessionError::InvalidLabel(s.to_string()))?;
        ConditionLabel::new(m.parse()?, block)
    }
}

#[derive(Serialize, Deserialize)]
struct ConditionLabelRepr {
    modality: Modality,
    block: u8,
    posture: Posture,
}

impl Serialize for ConditionLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ConditionLabelRepr {
            modality: self.modality,
            block: self.block,
            posture: self.posture(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ConditionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = ConditionLabelRepr::deserialize(deserializer)?;
        if repr.posture != repr.modality.posture() {
            return Err(serde::de::Error::custom(format!(
                "{} must be coded as {}",
                repr.modality,
                repr.modality.posture().as_str()
            )));
        }
        ConditionLabel::new(repr.modality, repr.block).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "EO")]
    EyesOpen,
    #[serde(rename = "EC")]
    EyesClosed,
}

/// What a recorded segment was: a resting baseline or a viewing condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentLabel {
    Baseline(BaselineKind),
    Condition(ConditionLabel),
}

impl SegmentLabel {
    pub fn condition(&self) -> Option<ConditionLabel> {
        match self {
            SegmentLabel::Condition(c) => Some(*c),
            SegmentLabel::Baseline(_) => None,
        }
    }
}

impl fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentLabel::Baseline(BaselineKind::EyesOpen) => f.write_str("EO"),
            SegmentLabel::Baseline(BaselineKind::EyesClosed) => f.write_str("EC"),
            SegmentLabel::Condition(c) => c.fmt(f),
        }
    }
}

impl FromStr for SegmentLabel {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "EO" => Ok(SegmentLabel::Baseline(BaselineKind::EyesOpen)),
            "EC" => Ok(SegmentLabel::Baseline(BaselineKind::EyesClosed)),
            _ => s.parse().map(SegmentLabel::Condition),
        }
    }
}

impl Serialize for SegmentLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SegmentLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Between-subject group: which interpretive modality a participant sees in
/// addition to the original artwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    ImmersiveGroup,
    DisplayGroup,
}

impl Group {
    pub fn interpretive(self) -> Modality {
        match self {
            Group::ImmersiveGroup => Modality::ImmersiveProjection,
            Group::DisplayGroup => Modality::DisplayVideo,
        }
    }

    pub fn for_modality(m: Modality) -> Option<Group> {
        match m {
            Modality::ImmersiveProjection => Some(Group::ImmersiveGroup),
            Modality::DisplayVideo => Some(Group::DisplayGroup),
            Modality::OriginalArtwork => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub participant_id: String,
    pub group: Group,
    /// Presentation order; block position is index + 1.
    pub order: Vec<Modality>,
}

impl GroupAssignment {
    pub fn new(participant_id: impl Into<String>, group: Group, order: Vec<Modality>) -> Result<Self, SessionError> {
        let participant_id = participant_id.into();
        let mut sorted = order.clone();
        sorted.sort();
        let mut expected = vec![Modality::OriginalArtwork, group.interpretive()];
        expected.sort();
        if sorted != expected {
            return Err(SessionError::InvalidAssignment(format!(
                "{participant_id}: order must be a permutation of OriginalArtwork and {}",
                group.interpretive()
            )));
        }
        Ok(Self { participant_id, group, order })
    }

    /// Condition labels in presentation order.
    pub fn plan(&self) -> Vec<ConditionLabel> {
        self.order
            .iter()
            .enumerate()
            .map(|(i, m)| ConditionLabel { modality: *m, block: i as u8 + 1 })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Counterbalance {
    pub assignments: Vec<GroupAssignment>,
    /// Human-readable notes for every group whose orders are not perfectly
    /// balanced. Empty when the design is balanced.
    pub imbalance: Vec<String>,
}

/// Assign participants to the two groups and alternate presentation orders.
///
/// Participants are shuffled with `seed`, then dealt alternately into the
/// immersive and display groups. Within each group the two orders alternate;
/// the display group starts from the opposite order so that odd group sizes
/// still balance across the whole cohort.
pub fn counterbalance(participants: &[String], seed: u64) -> Counterbalance {
    let mut shuffled = participants.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let mut counts = [[0usize; 2]; 2];
    let mut in_group = [0usize; 2];
    let mut assignments = Vec::with_capacity(shuffled.len());
    for (i, pid) in shuffled.into_iter().enumerate() {
        let g = i % 2;
        let group = if g == 0 { Group::ImmersiveGroup } else { Group::DisplayGroup };
        let order_idx = (in_group[g] + g) % 2;
        in_group[g] += 1;
        counts[g][order_idx] += 1;
        let order = if order_idx == 0 {
            vec![Modality::OriginalArtwork, group.interpretive()]
        } else {
            vec![group.interpretive(), Modality::OriginalArtwork]
        };
        assignments.push(GroupAssignment { participant_id: pid, group, order });
    }

    let mut imbalance = Vec::new();
    if in_group[0] != in_group[1] {
        imbalance.push(format!(
            "group sizes differ: ImmersiveGroup {} vs DisplayGroup {}",
            in_group[0], in_group[1]
        ));
    }
    for (g, name) in ["ImmersiveGroup", "DisplayGroup"].iter().enumerate() {
        if counts[g][0] != counts[g][1] {
            imbalance.push(format!(
                "{name}: original-first {} vs interpretive-first {}",
                counts[g][0], counts[g][1]
            ));
        }
    }
    Counterbalance { assignments, imbalance }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("P{i:02}")).collect()
    }

    fn first_modality_counts(cb: &Counterbalance) -> (usize, usize) {
        let original_first = cb
            .assignments
            .iter()
            .filter(|a| a.order[0] == Modality::OriginalArtwork)
            .count();
        (original_first, cb.assignments.len() - original_first)
    }

    #[test]
    fn ten_participants_each_order_five_times() {
        let cb = counterbalance(&ids(10), 7);
        assert_eq!(first_modality_counts(&cb), (5, 5));
        let imm = cb.assignments.iter().filter(|a| a.group == Group::ImmersiveGroup).count();
        assert_eq!(imm, 5);
        // 5 per group cannot split evenly into two orders
        assert_eq!(cb.imbalance.len(), 2);
    }

    #[test]
    fn twenty_participants_balanced_per_group() {
        let cb = counterbalance(&ids(20), 3);
        assert!(cb.imbalance.is_empty(), "{:?}", cb.imbalance);
        for group in [Group::ImmersiveGroup, Group::DisplayGroup] {
            let members: Vec<_> = cb.assignments.iter().filter(|a| a.group == group).collect();
            assert_eq!(members.len(), 10);
            let of = members.iter().filter(|a| a.order[0] == Modality::OriginalArtwork).count();
            assert_eq!(of, 5);
        }
    }

    #[test]
    fn two_participants_one_per_order() {
        let cb = counterbalance(&ids(2), 11);
        assert_eq!(first_modality_counts(&cb), (1, 1));
    }

    #[test]
    fn same_seed_same_assignment() {
        assert_eq!(
            counterbalance(&ids(12), 99).assignments,
            counterbalance(&ids(12), 99).assignments
        );
    }

    #[test]
    fn odd_count_flags_imbalance() {
        let cb = counterbalance(&ids(7), 1);
        assert!(cb.imbalance.iter().any(|s| s.starts_with("group sizes differ")));
    }

    #[test]
    fn posture_is_derived_from_modality() {
        let oa = ConditionLabel::new(Modality::OriginalArtwork, 1).unwrap();
        assert_eq!(oa.posture(), Posture::Standing);
        let dv = ConditionLabel::new(Modality::DisplayVideo, 2).unwrap();
        assert_eq!(dv.posture(), Posture::Seated);
        let bad = r#"{"modality":"OriginalArtwork","block":1,"posture":"seated"}"#;
        assert!(serde_json::from_str::<ConditionLabel>(bad).is_err());
        let good = serde_json::to_string(&dv).unwrap();
        assert_eq!(serde_json::from_str::<ConditionLabel>(&good).unwrap(), dv);
    }

    #[test]
    fn label_text_round_trip() {
        for s in ["EO", "EC", "OriginalArtwork/1", "ImmersiveProjection/3"] {
            assert_eq!(s.parse::<SegmentLabel>().unwrap().to_string(), s);
        }
        assert!("DisplayVideo/4".parse::<SegmentLabel>().is_err());
        assert!("Nope/1".parse::<SegmentLabel>().is_err());
    }

    #[test]
    fn assignment_requires_group_modality() {
        assert!(GroupAssignment::new(
            "P1",
            Group::DisplayGroup,
            vec![Modality::OriginalArtwork, Modality::ImmersiveProjection]
        )
        .is_err());
        let a = GroupAssignment::new(
            "P1",
            Group::DisplayGroup,
            vec![Modality::DisplayVideo, Modality::OriginalArtwork],
        )
        .unwrap();
        assert_eq!(a.plan()[1].to_string(), "OriginalArtwork/2");
    }
}
