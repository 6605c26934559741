//! Task templates and their cartesian expansion.
//!
//! ```toml
//! name = "render"
//! executable = "povray"
//! inputs = ["scene.pov"]
//! outputs = ["frame_${angle}.png"]
//!
//! [[domain]]
//! name = "angle"
//! kind = "range"
//! start = 0.0
//! step = 15.0
//! count = 24
//!
//! [[domain]]
//! name = "quality"
//! kind = "enumeration"
//! values = ["low", "high"]
//!
//! [[command]]
//! op = "run_process"
//! command = "povray"
//! args = ["+Iscene.pov", "+Oframe_${angle}.png", "+Q${quality}"]
//! ```

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::Payload;
use crate::models::TaskUnit;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SweepError {
    #[error("undeclared placeholder ${{{0}}}")]
    UndeclaredPlaceholder(String),
    #[error("domain {0} is empty")]
    EmptyDomain(String),
    #[error("domain {0} is declared twice")]
    DuplicateDomain(String),
    #[error("invalid domain {name}: {reason}")]
    InvalidDomain { name: String, reason: String },
    #[error("unterminated placeholder in {0:?}")]
    Unterminated(String),
    #[error("cannot parse template: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DomainKind {
    Range { start: f64, step: f64, count: u32 },
    Enumeration { values: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDomain {
    pub name: String,
    #[serde(flatten)]
    pub kind: DomainKind,
}

impl ParameterDomain {
    pub fn range(name: &str, start: f64, step: f64, count: u32) -> Self {
        Self { name: name.into(), kind: DomainKind::Range { start, step, count } }
    }

    pub fn enumeration<S: Into<String>>(name: &str, values: impl IntoIterator<Item = S>) -> Self {
        Self { name: name.into(), kind: DomainKind::Enumeration { values: values.into_iter().map(Into::into).collect() } }
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            DomainKind::Range { count, .. } => *count as usize,
            DomainKind::Enumeration { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as substituted text. Numbers use the shortest decimal that
    /// reads back to the same value.
    pub fn values(&self) -> Vec<String> {
        match &self.kind {
            DomainKind::Range { start, step, count } => {
                (0..*count).map(|i| format_number(start + step * f64::from(i))).collect()
            }
            DomainKind::Enumeration { values } => values.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        if !is_identifier(&self.name) {
            return Err(SweepError::InvalidDomain { name: self.name.clone(), reason: "not an identifier".into() });
        }
        match &self.kind {
            DomainKind::Range { count: 0, .. } => Err(SweepError::EmptyDomain(self.name.clone())),
            DomainKind::Range { step, start, .. } if *step == 0.0 || !step.is_finite() || !start.is_finite() => {
                Err(SweepError::InvalidDomain { name: self.name.clone(), reason: "step must be finite and nonzero".into() })
            }
            DomainKind::Enumeration { values } if values.is_empty() => Err(SweepError::EmptyDomain(self.name.clone())),
            _ => Ok(()),
        }
    }
}

fn format_number(v: f64) -> String {
    // -0 prints as "-0"; nobody wants that in a file name
    if v == 0.0 { "0".into() } else { v.to_string() }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// One command of the sequence a combination runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CommandTemplate {
    RunProcess {
        command: String,
        #[serde(default)]
        args: Vec<String>,
    },
    CopyFile { from: String, to: String },
    RenameFile { from: String, to: String },
    DeleteFile { path: String },
}

impl CommandTemplate {
    fn texts(&self) -> Vec<&str> {
        match self {
            CommandTemplate::RunProcess { command, args } => {
                std::iter::once(command.as_str()).chain(args.iter().map(String::as_str)).collect()
            }
            CommandTemplate::CopyFile { from, to } | CommandTemplate::RenameFile { from, to } => vec![from, to],
            CommandTemplate::DeleteFile { path } => vec![path],
        }
    }

    fn substitute(&self, b: &Bindings) -> Result<Payload, SweepError> {
        let s = |t: &str| substitute(t, b);
        Ok(match self {
            CommandTemplate::RunProcess { command, args } => {
                let args: Vec<String> = args.iter().map(|a| s(a)).collect::<Result<_, _>>()?;
                let refs: Vec<&str> = args.iter().map(String::as_str).collect();
                TaskUnit::run_process(&s(command)?, &refs).payload
            }
            CommandTemplate::CopyFile { from, to } => TaskUnit::copy_file(&s(from)?, &s(to)?).payload,
            CommandTemplate::RenameFile { from, to } => TaskUnit::rename_file(&s(from)?, &s(to)?).payload,
            CommandTemplate::DeleteFile { path } => TaskUnit::delete_file(&s(path)?).payload,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub executable: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default, rename = "domain")]
    pub domains: Vec<ParameterDomain>,
    #[serde(default, rename = "command")]
    pub commands: Vec<CommandTemplate>,
}

type Bindings = [(String, String)];

/// Names referenced as `${name}` in `text`, in order of appearance.
pub fn placeholders(text: &str) -> Result<Vec<String>, SweepError> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(at) = rest.find("${") {
        let after = &rest[at + 2..];
        let end = after.find('}').ok_or_else(|| SweepError::Unterminated(text.to_string()))?;
        out.push(after[..end].to_string());
        rest = &after[end + 1..];
    }
    Ok(out)
}

/// Replace every `${name}` in `text` with its bound value.
pub fn substitute(text: &str, bindings: &Bindings) -> Result<String, SweepError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(at) = rest.find("${") {
        out.push_str(&rest[..at]);
        let after = &rest[at + 2..];
        let end = after.find('}').ok_or_else(|| SweepError::Unterminated(text.to_string()))?;
        let name = &after[..end];
        let value = bindings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| SweepError::UndeclaredPlaceholder(name.to_string()))?;
        out.push_str(value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// One point of the parameter space with its concrete commands and files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Combination {
    pub index: usize,
    /// `(domain, value)` in declaration order.
    pub parameters: Vec<(String, String)>,
    pub commands: Vec<Payload>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Combination {
    /// The task for this combination: its commands run as one sequence.
    pub fn task(&self) -> TaskUnit {
        TaskUnit::sequence(self.commands.clone())
    }
}

impl TaskTemplate {
    pub fn parse(text: &str) -> Result<Self, SweepError> {
        let t: Self = toml::from_str(text).map_err(|e| SweepError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SweepError> {
        let text = std::fs::read_to_string(path).map_err(|e| SweepError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    fn texts(&self) -> impl Iterator<Item = &str> {
        self.commands
            .iter()
            .flat_map(CommandTemplate::texts)
            .chain(self.inputs.iter().map(String::as_str))
            .chain(self.outputs.iter().map(String::as_str))
    }

    /// Errors for anything that would make expansion fail. Returns the names
    /// of declared but unused domains.
    pub fn validate(&self) -> Result<Vec<String>, SweepError> {
        let mut names = HashSet::new();
        for d in &self.domains {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(SweepError::DuplicateDomain(d.name.clone()));
            }
        }
        let mut used = BTreeSet::new();
        for text in self.texts() {
            for p in placeholders(text)? {
                if !names.contains(p.as_str()) {
                    return Err(SweepError::UndeclaredPlaceholder(p));
                }
                used.insert(p);
            }
        }
        Ok(self.domains.iter().filter(|d| !used.contains(&d.name)).map(|d| d.name.clone()).collect())
    }

    /// Number of combinations, without expanding.
    pub fn combinations(&self) -> usize {
        self.domains.iter().map(ParameterDomain::len).product()
    }

    /// Every combination, odometer order: the last declared domain turns
    /// fastest.
    pub fn expand(&self) -> Result<Vec<Combination>, SweepError> {
        for unused in self.validate()? {
            tracing::warn!(domain = %unused, "domain is never referenced");
        }
        let values: Vec<Vec<String>> = self.domains.iter().map(ParameterDomain::values).collect();
        let total = self.combinations();
        let mut digits = vec![0usize; values.len()];
        let mut out = Vec::with_capacity(total);
        for index in 0..total {
            let bindings: Vec<(String, String)> = self
                .domains
                .iter()
                .enumerate()
                .map(|(pos, d)| (d.name.clone(), values[pos][digits[pos]].clone()))
                .collect();
            let commands = self.commands.iter().map(|c| c.substitute(&bindings)).collect::<Result<_, _>>()?;
            let inputs = self.inputs.iter().map(|t| substitute(t, &bindings)).collect::<Result<_, _>>()?;
            let outputs = self.outputs.iter().map(|t| substitute(t, &bindings)).collect::<Result<_, _>>()?;
            out.push(Combination { index, parameters: bindings, commands, inputs, outputs });
            for pos in (0..digits.len()).rev() {
                digits[pos] += 1;
                if digits[pos] < values[pos].len() {
                    break;
                }
                digits[pos] = 0;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn template(domains: Vec<ParameterDomain>) -> TaskTemplate {
        let args = domains.iter().map(|d| format!("${{{}}}", d.name)).collect();
        TaskTemplate {
            name: "t".into(),
            executable: "echo".into(),
            inputs: vec![],
            outputs: vec![],
            domains,
            commands: vec![CommandTemplate::RunProcess { command: "echo".into(), args }],
        }
    }

    #[test]
    fn range_values() {
        assert_eq!(ParameterDomain::range("x", 0.0, 0.5, 3).values(), ["0", "0.5", "1"]);
        assert_eq!(ParameterDomain::range("x", 10.0, -2.5, 3).values(), ["10", "7.5", "5"]);
    }

    #[test]
    fn two_by_three() {
        let t = template(vec![ParameterDomain::enumeration("a", ["p", "q"]), ParameterDomain::range("b", 1.0, 1.0, 3)]);
        let combos = t.expand().unwrap();
        assert_eq!(combos.len(), 6);
        let tuples: Vec<_> = combos.iter().map(|c| (c.parameters[0].1.clone(), c.parameters[1].1.clone())).collect();
        assert_eq!(tuples[0], ("p".to_string(), "1".to_string()));
        assert_eq!(tuples[1], ("p".to_string(), "2".to_string()));
        assert_eq!(tuples[3], ("q".to_string(), "1".to_string()));
        assert_eq!(tuples.iter().collect::<HashSet<_>>().len(), 6);
    }

    #[test]
    fn undeclared_placeholder() {
        let mut t = template(vec![]);
        t.commands = vec![CommandTemplate::RunProcess { command: "render".into(), args: vec!["${x}".into()] }];
        assert_eq!(t.expand(), Err(SweepError::UndeclaredPlaceholder("x".into())));
    }

    #[test]
    fn empty_domains_are_errors() {
        assert_eq!(
            template(vec![ParameterDomain::enumeration::<String>("a", [])]).validate(),
            Err(SweepError::EmptyDomain("a".into()))
        );
        assert_eq!(
            template(vec![ParameterDomain::range("a", 0.0, 1.0, 0)]).validate(),
            Err(SweepError::EmptyDomain("a".into()))
        );
        assert!(template(vec![ParameterDomain::range("a", 0.0, 0.0, 2)]).validate().is_err());
    }

    #[test]
    fn unused_domain_is_a_warning() {
        let mut t = template(vec![ParameterDomain::enumeration("a", ["1"])]);
        t.commands.clear();
        assert_eq!(t.validate().unwrap(), vec!["a".to_string()]);
        assert_eq!(t.expand().unwrap().len(), 1);
    }

    #[test]
    fn toml_roundtrip() {
        let mut t = template(vec![ParameterDomain::range("x", 0.0, 0.25, 4), ParameterDomain::enumeration("c", ["r", "g"])]);
        t.inputs = vec!["in_${c}.txt".into()];
        t.outputs = vec!["out_${x}_${c}.txt".into()];
        t.commands.push(CommandTemplate::CopyFile { from: "in_${c}.txt".into(), to: "out_${x}_${c}.txt".into() });
        let back = TaskTemplate::parse(&t.to_toml()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_toml(), t.to_toml());
    }

    #[test]
    fn integer_literals_parse_as_numbers() {
        let t = TaskTemplate::parse(
            "[[domain]]\nname = \"n\"\nkind = \"range\"\nstart = 1\nstep = 2\ncount = 3\n\n[[command]]\nop = \"delete_file\"\npath = \"f${n}\"\n",
        )
        .unwrap();
        let names: Vec<_> = t.expand().unwrap().into_iter().map(|c| c.parameters[0].1.clone()).collect();
        assert_eq!(names, ["1", "3", "5"]);
    }

    proptest! {
        #[test]
        fn expansion_is_the_cartesian_product(sizes in proptest::collection::vec(1usize..4, 0..4)) {
            let domains: Vec<_> = sizes
                .iter()
                .enumerate()
                .map(|(i, n)| ParameterDomain::enumeration(&format!("d{i}"), (0..*n).map(|v| v.to_string())))
                .collect();
            let t = template(domains);
            let combos = t.expand().unwrap();
            // brute force with nested counting
            let mut expected = vec![vec![]];
            for n in &sizes {
                expected = expected
                    .into_iter()
                    .flat_map(|prefix: Vec<String>| (0..*n).map(move |v| { let mut p = prefix.clone(); p.push(v.to_string()); p }))
                    .collect();
            }
            let got: Vec<Vec<String>> = combos.iter().map(|c| c.parameters.iter().map(|(_, v)| v.clone()).collect()).collect();
            prop_assert_eq!(got, expected);
            for c in &combos {
                let json = serde_json::to_string(&c.commands).unwrap();
                prop_assert!(!json.contains("${"), "placeholder left in {}", json);
            }
        }
    }
}
