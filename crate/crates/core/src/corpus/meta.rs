use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CorpusError, MAX_SECTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Anomaly,
    /// Evaluation-style test clip without a label.
    Unknown,
}

macro_rules! token_enum {
    ($ty:ident { $($variant:ident => $tok:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $tok),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = ();

            fn from_str(s: &str) -> Result<Self, ()> {
                match s {
                    $($tok => Ok($ty::$variant),)+
                    _ => Err(()),
                }
            }
        }
    };
}

token_enum!(Domain { Source => "source", Target => "target" });
token_enum!(Split { Train => "train", Test => "test" });
token_enum!(Condition { Normal => "normal", Anomaly => "anomaly", Unknown => "unknown" });

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Source, Domain::Target];
}

/// Side information carried by a clip's path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClipMeta {
    pub machine_type: String,
    pub section: u8,
    pub domain: Domain,
    pub split: Split,
    pub condition: Condition,
    pub clip_id: u32,
}

impl ClipMeta {
    /// File name without the machine directory.
    pub fn file_name(&self) -> String {
        let mut name = format!(
            "section_{:02}_{}_{}_",
            self.section, self.domain, self.split
        );
        if self.condition != Condition::Unknown {
            name.push_str(self.condition.as_str());
            name.push('_');
        }
        name.push_str(&format!("{:04}.wav", self.clip_id));
        name
    }
}

/// Relative path `<machine>/<file name>` for a clip.
pub fn format_clip_path(meta: &ClipMeta) -> String {
    format!("{}/{}", meta.machine_type, meta.file_name())
}

/// Parses `<machine>/section_<NN>_<domain>_<split>[_<condition>]_<IIII>.wav`.
///
/// Any leading directories before the machine directory are ignored.
pub fn parse_clip_path(path: impl AsRef<Path>) -> Result<ClipMeta, CorpusError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let err = |token: &str| CorpusError::Parse {
        path: shown.clone(),
        token: token.to_string(),
    };

    let file = path
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| err("file name"))?;
    let machine_type = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|m| m.to_str())
        .filter(|m| !m.is_empty())
        .ok_or_else(|| err("machine directory"))?
        .to_string();

    let stem = file
        .strip_suffix(".wav")
        .ok_or_else(|| err(&format!("extension in `{file}`")))?;
    let tokens: Vec<&str> = stem.split('_').collect();
    if tokens.len() != 5 && tokens.len() != 6 {
        return Err(err(&format!("token count in `{file}`")));
    }
    if tokens[0] != "section" {
        return Err(err(&format!("prefix `{}`", tokens[0])));
    }

    let section = parse_digits(tokens[1], 2)
        .filter(|&n| n <= MAX_SECTION as u32)
        .ok_or_else(|| err(&format!("section `{}`", tokens[1])))? as u8;
    let domain = tokens[2]
        .parse::<Domain>()
        .map_err(|_| err(&format!("domain `{}`", tokens[2])))?;
    let split = tokens[3]
        .parse::<Split>()
        .map_err(|_| err(&format!("split `{}`", tokens[3])))?;
    let condition = if tokens.len() == 6 {
        match tokens[4].parse::<Condition>() {
            Ok(Condition::Unknown) | Err(()) => {
                return Err(err(&format!("condition `{}`", tokens[4])))
            }
            Ok(c) => c,
        }
    } else {
        Condition::Unknown
    };
    let id_tok = tokens[tokens.len() - 1];
    let clip_id = parse_digits(id_tok, 4).ok_or_else(|| err(&format!("clip id `{id_tok}`")))?;

    Ok(ClipMeta {
        machine_type,
        section,
        domain,
        split,
        condition,
        clip_id,
    })
}

fn parse_digits(tok: &str, width: usize) -> Option<u32> {
    if tok.len() != width || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    tok.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_development_name() {
        let meta = parse_clip_path("fan/section_00_source_train_normal_0003.wav").unwrap();
        assert_eq!(
            meta,
            ClipMeta {
                machine_type: "fan".into(),
                section: 0,
                domain: Domain::Source,
                split: Split::Train,
                condition: Condition::Normal,
                clip_id: 3,
            }
        );
    }

    #[test]
    fn parses_evaluation_name_as_unknown() {
        let meta = parse_clip_path("gearbox/section_03_target_test_0010.wav").unwrap();
        assert_eq!(meta.machine_type, "gearbox");
        assert_eq!(meta.section, 3);
        assert_eq!(meta.domain, Domain::Target);
        assert_eq!(meta.split, Split::Test);
        assert_eq!(meta.condition, Condition::Unknown);
        assert_eq!(meta.clip_id, 10);
    }

    #[test]
    fn ignores_leading_directories() {
        let meta =
            parse_clip_path("/data/dev/fan/section_01_source_test_anomaly_0042.wav").unwrap();
        assert_eq!(meta.machine_type, "fan");
        assert_eq!(meta.condition, Condition::Anomaly);
    }

    #[test]
    fn malformed_names_name_the_token() {
        let msg = |p: &str| parse_clip_path(p).unwrap_err().to_string();
        assert!(msg("fan/sect_0.wav").contains("token count"));
        assert!(msg("fan/section_09_source_train_normal_0003.wav").contains("section `09`"));
        assert!(msg("fan/section_00_elsewhere_train_normal_0003.wav").contains("domain"));
        assert!(msg("fan/section_00_source_dev_normal_0003.wav").contains("split"));
        assert!(msg("fan/section_00_source_train_broken_0003.wav").contains("condition"));
        assert!(msg("fan/section_00_source_train_unknown_0003.wav").contains("condition"));
        assert!(msg("fan/section_00_source_train_normal_003.wav").contains("clip id"));
        assert!(msg("fan/section_00_source_train_normal_0003.flac").contains("extension"));
        assert!(msg("section_00_source_train_normal_0003.wav").contains("machine"));
    }

    fn arb_meta() -> impl Strategy<Value = ClipMeta> {
        (
            "[a-z][a-z0-9_-]{0,11}",
            0u8..=MAX_SECTION,
            prop_oneof![Just(Domain::Source), Just(Domain::Target)],
            prop_oneof![Just(Split::Train), Just(Split::Test)],
            prop_oneof![
                Just(Condition::Normal),
                Just(Condition::Anomaly),
                Just(Condition::Unknown)
            ],
            0u32..10_000,
        )
            .prop_map(
                |(machine_type, section, domain, split, condition, clip_id)| ClipMeta {
                    machine_type,
                    section,
                    domain,
                    split,
                    condition,
                    clip_id,
                },
            )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn path_round_trip(meta in arb_meta()) {
            let path = format_clip_path(&meta);
            let parsed = parse_clip_path(&path).unwrap();
            prop_assert_eq!(&parsed, &meta);
            prop_assert_eq!(format_clip_path(&parsed), path);
        }
    }
}
