//! Text-mining rule sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class a rule assigns. `Contrast` is the coarse A/V/D label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MinedClass {
    NC,
    A,
    V,
    D,
    Contrast,
    Other,
}

impl MinedClass {
    pub const ALL: [MinedClass; 6] = [Self::NC, Self::A, Self::V, Self::D, Self::Contrast, Self::Other];

    /// Tie-break rank among equal-length matches; lower wins.
    pub(crate) fn priority(self) -> u8 {
        match self {
            Self::Other => 0,
            Self::NC => 1,
            Self::A => 2,
            Self::V => 3,
            Self::D => 4,
            Self::Contrast => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NC => "NC",
            Self::A => "A",
            Self::V => "V",
            Self::D => "D",
            Self::Contrast => "Contrast",
            Self::Other => "Other",
        }
    }
}

impl fmt::Display for MinedClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MinedClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()) || (s.trim().eq_ignore_ascii_case("O") && *c == Self::Other))
            .ok_or_else(|| format!("unknown class '{s}'"))
    }
}

/// DICOM text field a rule inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleField {
    Series,
    Study,
    Protocol,
}

impl RuleField {
    pub fn name(self) -> &'static str {
        match self {
            Self::Series => "series",
            Self::Study => "study",
            Self::Protocol => "protocol",
        }
    }
}

impl FromStr for RuleField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "series" => Ok(Self::Series),
            "study" => Ok(Self::Study),
            "protocol" => Ok(Self::Protocol),
            other => Err(format!("unknown field '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub class: MinedClass,
    pub field: RuleField,
    pub pattern: String,
    pub(crate) folded: String,
}

impl Rule {
    pub fn new(class: MinedClass, field: RuleField, pattern: &str) -> Self {
        Self {
            class,
            field,
            pattern: pattern.to_string(),
            folded: pattern.to_lowercase(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("rule file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty pattern for class {0}")]
    EmptyPattern(MinedClass),
    #[error("duplicate rule ({0}, {1}, '{2}')")]
    Duplicate(MinedClass, &'static str, String),
}

/// Ordered list of rules; order breaks ties after length and class priority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

pub const RULE_FILE_HEADER: &str = "phase-curator-rules";
pub const RULE_FILE_VERSION: u32 = 1;

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Result<Self, RuleError> {
        for (i, r) in rules.iter().enumerate() {
            if r.pattern.trim().is_empty() {
                return Err(RuleError::EmptyPattern(r.class));
            }
            if rules[..i].iter().any(|o| o.class == r.class && o.field == r.field && o.folded == r.folded) {
                return Err(RuleError::Duplicate(r.class, r.field.name(), r.pattern.clone()));
            }
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn push(&mut self, rule: Rule) -> Result<(), RuleError> {
        let mut v = std::mem::take(&mut self.rules);
        v.push(rule);
        match Self::new(v) {
            Ok(s) => {
                *self = s;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// Parse the text format: a `phase-curator-rules 1` header, then one
    /// `class<TAB>field<TAB>pattern` rule per line. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let mut header_seen = false;
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            if !header_seen {
                let mut parts = trimmed.split_whitespace();
                if parts.next() != Some(RULE_FILE_HEADER) {
                    return Err(RuleError::Parse {
                        line,
                        msg: format!("expected header '{RULE_FILE_HEADER} {RULE_FILE_VERSION}'"),
                    });
                }
                let version = parts.next().and_then(|v| v.parse::<u32>().ok());
                if version != Some(RULE_FILE_VERSION) {
                    return Err(RuleError::Parse {
                        line,
                        msg: format!("unsupported rule file version {version:?}"),
                    });
                }
                header_seen = true;
                continue;
            }
            let cols: Vec<&str> = trimmed.splitn(3, '\t').collect();
            if cols.len() != 3 {
                return Err(RuleError::Parse {
                    line,
                    msg: "expected class<TAB>field<TAB>pattern".into(),
                });
            }
            let class = cols[0].parse().map_err(|msg| RuleError::Parse { line, msg })?;
            let field = cols[1].parse().map_err(|msg| RuleError::Parse { line, msg })?;
            rules.push(Rule::new(class, field, cols[2]));
        }
        if !header_seen {
            return Err(RuleError::Parse {
                line: 0,
                msg: "missing header".into(),
            });
        }
        Self::new(rules)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{RULE_FILE_HEADER} {RULE_FILE_VERSION}\n");
        for r in &self.rules {
            s.push_str(&format!("{}\t{}\t{}\n", r.class, r.field.name(), r.pattern));
        }
        s
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        default_rules()
    }
}

const ARTERIAL: &[&str] = &[
    "arterial",
    "liver A",
    "Liver -A",
    "Artery",
    "HAP",
    "Liver 3P A",
    "Liver 3P C+ A",
    "A Phase",
    "A-Phase",
    "Liver 3P C-+ A.",
    "CTA",
    "Liver 4P A",
    "30s",
];

// "Liver -V" appears twice in the source table; kept once.
const VENOUS: &[&str] = &[
    "venous",
    "Liver 3P V",
    "Liver 3P C+ V",
    "Liver 3P +H",
    "LIVER H",
    "Liver -V",
    "Liver V",
    "Portal",
    "Liver P.",
    "Vena",
    "PVP",
    "Phase H.",
    "H./Phase",
    "V phase",
    "phase V",
    "V-phase",
    "Liver 3P C-+ V.",
    "CTV",
    "Liver 4P V",
    "70s",
];

const DELAY: &[&str] = &[
    "Liver 3P D",
    "Liver D.",
    "Liver -D",
    "delay",
    "Liver 3P C-+ D.",
    "Liver 3P C+ D",
    "D-phase",
    "Liver 4P D",
    "DP",
    "180s",
    "EQP",
];

const NON_CONTRAST: &[&str] = &[
    "C-",
    "PRECONTRAST",
    "Abd-pelvis without contrast",
    "Non:Contrast",
    "Non Contrast",
    "Non-Contrast",
    "NoC",
];

const CONTRAST: &[&str] = &["ABD C+", "A C+", "abdomen C+", "AbdPel C", "Body C+", "with contrast", "POSTCONTRAST"];

const OTHER_SERIES: &[&str] = &[
    "Topo",
    "scano",
    "scout",
    "surview",
    "MIP",
    "volume",
    "monitor",
    "cor",
    "obl",
    "reformatted",
    "brain",
    "lung",
    "CXR",
    "chest",
    "pelvic",
    "Pelvis",
    "3 Phase Liver",
    "120CC/3CC/SEC",
    "4cc sec",
    "Tri-Phase Liver",
];

/// Built-in rule set: the dynamic liver CT text-mining table.
pub fn default_rules() -> RuleSet {
    use MinedClass::*;
    use RuleField::*;
    let mut rules = Vec::new();
    let mut add = |class, field, pats: &[&str]| {
        for p in pats {
            rules.push(Rule::new(class, field, p));
        }
    };
    add(A, Series, ARTERIAL);
    add(V, Series, VENOUS);
    add(D, Series, DELAY);
    add(NC, Series, NON_CONTRAST);
    add(Contrast, Series, CONTRAST);
    add(Other, Protocol, &["CTAP"]);
    add(Other, Series, &["CTAP"]);
    add(Other, Study, &["guide", "BX", "POST"]);
    add(Other, Series, &["guide", "BX", "POST"]);
    add(Other, Series, OTHER_SERIES);
    RuleSet::new(rules).expect("built-in rules are valid")
}
