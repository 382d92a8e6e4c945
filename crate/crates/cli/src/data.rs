//! CSV ingestion and model construction.

use std::path::Path;

use hdekit_core::families::Family;
use hdekit_core::links::LinkKind;
use hdekit_core::numkit::Matrix;
use hdekit_core::vglm::{constraint_cols, constraint_parallel, constraint_trivial, ModelSpec};

use crate::args::ModelArgs;
use crate::Failure;

/// Numeric columns read from a headered CSV.
#[derive(Debug, Clone)]
pub struct Frame {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Frame {
    pub fn read(path: &Path, wanted: &[&str]) -> Result<Frame, Failure> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut idx = Vec::with_capacity(wanted.len());
        for w in wanted {
            match headers.iter().position(|h| h == w) {
                Some(i) => idx.push(i),
                None => return Err(Failure::Config(format!("column '{w}' not found in {}", path.display()))),
            }
        }
        let mut columns = vec![Vec::new(); wanted.len()];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let line = rec.position().map_or(0, |p| p.line());
            for (c, &i) in idx.iter().enumerate() {
                let raw = rec.get(i).unwrap_or("");
                let v: f64 = raw.parse().map_err(|_| {
                    Failure::Config(format!("line {line}: column '{}' value '{raw}' is not numeric", wanted[c]))
                })?;
                if !v.is_finite() {
                    return Err(Failure::Config(format!("line {line}: column '{}' value '{raw}' is not finite", wanted[c])));
                }
                columns[c].push(v);
            }
        }
        if columns.first().is_none_or(|c| c.is_empty()) {
            return Err(Failure::Config(format!("{} has no data rows", path.display())));
        }
        Ok(Frame { headers: wanted.iter().map(|s| s.to_string()).collect(), columns })
    }

    pub fn column(&self, name: &str) -> &[f64] {
        let i = self.headers.iter().position(|h| h == name).expect("column was requested when reading");
        &self.columns[i]
    }
}

/// One constraint token of the `--constraints` grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstraintToken {
    Trivial,
    Parallel,
    Cols(Vec<usize>),
}

impl ConstraintToken {
    pub fn parse(s: &str) -> Result<Self, Failure> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "trivial" => return Ok(Self::Trivial),
            "parallel" => return Ok(Self::Parallel),
            _ => {}
        }
        let inner = t
            .strip_prefix("cols(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Failure::Config(format!("bad constraint '{s}'; expected trivial, parallel or cols(j,...)")))?;
        let cols = inner
            .split(',')
            .map(|c| c.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| Failure::Config(format!("bad column list in '{s}'")))?;
        Ok(Self::Cols(cols))
    }

    pub fn matrix(&self, m: usize) -> Result<Matrix, Failure> {
        match self {
            Self::Trivial => Ok(constraint_trivial(m)),
            Self::Parallel => Ok(constraint_parallel(m)),
            Self::Cols(c) => constraint_cols(m, c).map_err(|e| Failure::Config(format!("cols{c:?}: {e}"))),
        }
    }
}

/// `name:token;name:token`, with `(Intercept)` naming the intercept.
pub fn parse_constraints(spec: &str, terms: &[String]) -> Result<Vec<ConstraintToken>, Failure> {
    let mut out = vec![ConstraintToken::Trivial; terms.len()];
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, tok) = part
            .split_once(':')
            .ok_or_else(|| Failure::Config(format!("constraint '{part}' is not of the form name:token")))?;
        let k = terms
            .iter()
            .position(|t| t == name.trim())
            .ok_or_else(|| Failure::Config(format!("constraint names unknown term '{}'", name.trim())))?;
        out[k] = ConstraintToken::parse(tok)?;
    }
    Ok(out)
}

fn link(s: Option<&String>, default: LinkKind) -> Result<LinkKind, Failure> {
    match s {
        None => Ok(default),
        Some(s) => s.parse().map_err(|e: hdekit_core::Error| Failure::Config(e.to_string())),
    }
}

pub fn build_family(args: &ModelArgs, y: &[f64]) -> Result<Family, Failure> {
    let l = &args.links;
    let expect = |n: usize| -> Result<(), Failure> {
        if l.len() > n {
            Err(Failure::Config(format!("family '{}' takes at most {n} link(s), got {}", args.family, l.len())))
        } else {
            Ok(())
        }
    };
    match args.family.trim().to_ascii_lowercase().as_str() {
        "binomial" => {
            expect(1)?;
            Ok(Family::binomial(link(l.first(), LinkKind::Logit)?))
        }
        "poisson" => {
            expect(1)?;
            Ok(Family::poisson(link(l.first(), LinkKind::Log)?))
        }
        "normal" | "uninormal" => {
            expect(2)?;
            Ok(Family::normal(link(l.first(), LinkKind::Identity)?, link(l.get(1), LinkKind::Log)?))
        }
        "cumulative" => {
            expect(1)?;
            let levels = match args.levels {
                Some(k) => k,
                None => y.iter().fold(0.0f64, |a, &b| a.max(b)) as usize,
            };
            Family::cumulative(levels, link(l.first(), LinkKind::Logit)?, args.reversed)
                .map_err(|e| Failure::Config(e.to_string()))
        }
        "zip" | "zipoisson" => {
            expect(2)?;
            Ok(Family::zip(link(l.first(), LinkKind::Logit)?, link(l.get(1), LinkKind::Log)?))
        }
        other => Err(Failure::Config(format!("unsupported family '{other}'"))),
    }
}

/// Read the input and assemble the model.
pub fn load_model(args: &ModelArgs) -> Result<ModelSpec, Failure> {
    let mut wanted: Vec<&str> = vec![args.response.as_str()];
    wanted.extend(args.covariates.iter().map(String::as_str));
    if let Some(w) = &args.weights {
        wanted.push(w.as_str());
    }
    let mut frame = Frame::read(&args.input, &wanted)?;
    if let Some(w) = &args.weights {
        // rows with zero weight contribute nothing; empty cells of grouped tables are dropped
        let keep: Vec<bool> = frame.column(w).iter().map(|v| *v != 0.0).collect();
        for col in &mut frame.columns {
            let mut it = keep.iter();
            col.retain(|_| *it.next().unwrap());
        }
        if frame.columns[0].is_empty() {
            return Err(Failure::Config("every row has zero weight".into()));
        }
    }
    let y = frame.column(&args.response).to_vec();
    let family = build_family(args, &y)?;
    let n = y.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| std::iter::once(1.0).chain(args.covariates.iter().map(|c| frame.column(c)[i])).collect())
        .collect();
    let x = Matrix::from_rows(&rows).map_err(|e| Failure::Config(e.to_string()))?;
    let mut terms = vec!["(Intercept)".to_string()];
    terms.extend(args.covariates.iter().cloned());
    let tokens = parse_constraints(args.constraints.as_deref().unwrap_or(""), &terms)?;
    let m = family.m();
    let constraints = tokens.iter().map(|t| t.matrix(m)).collect::<Result<Vec<_>, _>>()?;
    for (i, &yi) in y.iter().enumerate() {
        family
            .check_response(yi)
            .map_err(|e| Failure::Config(format!("row {}: response {yi}: {e}", i + 1)))?;
    }
    let mut spec = ModelSpec::new(family, x, y).with_names(terms).with_constraints(constraints);
    if let Some(w) = &args.weights {
        let w = frame.column(w).to_vec();
        if let Some(bad) = w.iter().find(|v| **v < 0.0) {
            return Err(Failure::Config(format!("negative prior weight {bad}")));
        }
        spec = spec.with_weights(w);
    }
    Ok(spec)
}
