//! Interactive template builder. Walks five steps: executable, parameters
//! and their domains, input files, output files, command sequence.

use std::io::{self, BufRead, Write};

use super::template::{is_identifier, placeholders, CommandTemplate, ParameterDomain, SweepError, TaskTemplate};

pub struct Wizard<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> Wizard<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self { input, output }
    }

    fn ask(&mut self, prompt: &str) -> io::Result<String> {
        write!(self.output, "{prompt}")?;
        self.output.flush()?;
        let mut line = String::new();
        if self.input.read_line(&mut line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "input ended"));
        }
        Ok(line.trim().to_string())
    }

    fn complain(&mut self, message: impl std::fmt::Display) -> io::Result<()> {
        writeln!(self.output, "error: {message}")
    }

    fn check_placeholders(&self, text: &str, domains: &[ParameterDomain]) -> Result<(), SweepError> {
        for p in placeholders(text)? {
            if !domains.iter().any(|d| d.name == p) {
                return Err(SweepError::UndeclaredPlaceholder(p));
            }
        }
        Ok(())
    }

    fn domain(&mut self, name: &str) -> io::Result<ParameterDomain> {
        loop {
            let kind = self.ask("  kind (range/enum): ")?;
            let domain = match kind.as_str() {
                "range" | "r" => {
                    let line = self.ask("  start step count: ")?;
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    let parsed = match parts.as_slice() {
                        [a, b, c] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()).zip(c.parse::<u32>().ok()),
                        _ => None,
                    };
                    match parsed {
                        Some(((start, step), count)) => ParameterDomain::range(name, start, step, count),
                        None => {
                            self.complain("expected three numbers, e.g. `0 0.5 3`")?;
                            continue;
                        }
                    }
                }
                "enum" | "enumeration" | "e" => {
                    let line = self.ask("  values (comma separated): ")?;
                    let values: Vec<String> =
                        line.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
                    ParameterDomain::enumeration(name, values)
                }
                _ => {
                    self.complain("kind must be range or enum")?;
                    continue;
                }
            };
            match domain.validate() {
                Ok(()) => return Ok(domain),
                Err(e) => self.complain(e)?,
            }
        }
    }

    fn file_list(&mut self, prompt: &str, domains: &[ParameterDomain]) -> io::Result<Vec<String>> {
        let mut files = Vec::new();
        loop {
            let f = self.ask(prompt)?;
            if f.is_empty() {
                return Ok(files);
            }
            match self.check_placeholders(&f, domains) {
                Ok(()) => files.push(f),
                Err(e) => self.complain(e)?,
            }
        }
    }

    pub fn run(mut self) -> io::Result<TaskTemplate> {
        writeln!(self.output, "Step 1 of 5: executable")?;
        let executable = loop {
            let e = self.ask("Executable: ")?;
            if !e.is_empty() {
                break e;
            }
            self.complain("an executable is required")?;
        };

        writeln!(self.output, "Step 2 of 5: parameters")?;
        let mut domains: Vec<ParameterDomain> = Vec::new();
        loop {
            let name = self.ask("Parameter name (blank to finish): ")?;
            if name.is_empty() {
                break;
            }
            if !is_identifier(&name) {
                self.complain(format!("{name:?} is not an identifier"))?;
                continue;
            }
            if domains.iter().any(|d| d.name == name) {
                self.complain(SweepError::DuplicateDomain(name))?;
                continue;
            }
            let d = self.domain(&name)?;
            domains.push(d);
        }

        writeln!(self.output, "Step 3 of 5: input files")?;
        let inputs = self.file_list("Input file (blank to finish): ", &domains)?;
        writeln!(self.output, "Step 4 of 5: output files")?;
        let outputs = self.file_list("Output file (blank to finish): ", &domains)?;

        writeln!(self.output, "Step 5 of 5: commands, as arguments to {executable}")?;
        let mut commands = Vec::new();
        loop {
            let line = self.ask("Arguments (blank to finish): ")?;
            if line.is_empty() {
                if commands.is_empty() {
                    self.complain("at least one command is required")?;
                    continue;
                }
                break;
            }
            match self.check_placeholders(&line, &domains) {
                Ok(()) => commands.push(CommandTemplate::RunProcess {
                    command: executable.clone(),
                    args: line.split_whitespace().map(String::from).collect(),
                }),
                Err(e) => self.complain(e)?,
            }
        }

        let template = TaskTemplate { name: executable.clone(), executable, inputs, outputs, domains, commands };
        let unused = template.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        for u in unused {
            writeln!(self.output, "warning: parameter {u} is never used")?;
        }
        writeln!(self.output, "{} combinations", template.combinations())?;
        Ok(template)
    }
}
