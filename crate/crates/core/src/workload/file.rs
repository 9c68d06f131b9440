use std::path::Path;

use super::{normalize_nest, Program, Stmt, WorkloadError};

/// Parses a program from TOML, normalizes its loops and validates it.
pub fn parse_program(text: &str) -> Result<Program, WorkloadError> {
    let mut prog: Program = toml::from_str(text).map_err(|e| WorkloadError::Parse(e.to_string()))?;
    for f in prog.functions.values_mut() {
        normalize_body(&mut f.body)?;
    }
    prog.validate()?;
    Ok(prog)
}

pub fn load_program(path: &Path) -> Result<Program, WorkloadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| WorkloadError::Io(format!("{}: {e}", path.display())))?;
    parse_program(&text)
}

pub fn program_to_toml(prog: &Program) -> String {
    toml::to_string(prog).expect("programs always serialize")
}

fn normalize_body(body: &mut [Stmt]) -> Result<(), WorkloadError> {
    for s in body {
        match s {
            Stmt::Nest(n) => *n = normalize_nest(n)?,
            Stmt::Cond(c) => normalize_body(&mut c.body)?,
            _ => {}
        }
    }
    Ok(())
}
