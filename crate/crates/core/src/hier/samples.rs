use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Post-warmup draws: one `draws x parameters` matrix per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    names: Vec<String>,
    chains: Vec<Array2<f64>>,
}

impl PosteriorSamples {
    pub fn new(names: Vec<String>, chains: Vec<Array2<f64>>) -> Result<Self> {
        if chains.is_empty() {
            return Err(Error::invalid("posterior needs at least one chain"));
        }
        let draws = chains[0].nrows();
        for c in &chains {
            if c.ncols() != names.len() || c.nrows() != draws {
                return Err(Error::invalid("ragged posterior chains"));
            }
        }
        Ok(Self { names, chains })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains[0].nrows()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-chain draws of parameter column `j`.
    pub fn chains_of(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.column(j).to_vec()).collect()
    }

    /// All draws of a named parameter, chains concatenated.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.index_of(name)?;
        Some(
            self.chains
                .iter()
                .flat_map(|c| c.column(j).to_vec())
                .collect(),
        )
    }

    pub fn chain(&self, c: usize) -> &Array2<f64> {
        &self.chains[c]
    }

    /// Long-format CSV: `chain,draw,parameter,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["chain", "draw", "parameter", "value"])?;
        for (c, m) in self.chains.iter().enumerate() {
            for (d, row) in m.outer_iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    wr.write_record([
                        c.to_string(),
                        d.to_string(),
                        self.names[j].clone(),
                        format!("{v:e}"),
                    ])?;
                }
            }
        }
        wr.flush().map_err(|e| Error::io("<draws>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut names: Vec<String> = Vec::new();
        let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let parse_usize = |k: usize, col: &str| {
                field(k).parse::<usize>().map_err(|e| Error::Parse {
                    row: row + 1,
                    column: col.into(),
                    message: e.to_string(),
                })
            };
            let c = parse_usize(0, "chain")?;
            let d = parse_usize(1, "draw")?;
            let name = field(2).to_string();
            let v: f64 = field(3)
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::Parse {
                    row: row + 1,
                    column: "value".into(),
                    message: e.to_string(),
                })?;
            let j = match names.iter().position(|n| *n == name) {
                Some(j) => j,
                None => {
                    names.push(name);
                    names.len() - 1
                }
            };
            cells.push((c, d, j, v));
        }
        let n_chains = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let n_draws = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut chains = vec![Array2::from_elem((n_draws, names.len()), f64::NAN); n_chains];
        for (c, d, j, v) in cells {
            chains[c][[d, j]] = v;
        }
        Self::new(names, chains)
    }
}
