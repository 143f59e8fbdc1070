//! FACS knowledge base: action-unit and expression descriptions, the
//! binary AU/expression correspondence matrix `P`, and its row-normalized
//! form used to initialize the dynamic prior mapping.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A FACS action unit and its canonical description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionUnitDef {
    pub au_id: u32,
    pub description: String,
}

/// An expression category, its prototypical AU combination, and the three
/// description styles used by the prototype module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpressionDef {
    pub name: String,
    pub au_combination: BTreeSet<u32>,
    pub compound_description: String,
    pub standalone_description: String,
    pub word_description: String,
}

/// The full description table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FacsTable {
    pub aus: Vec<ActionUnitDef>,
    pub expressions: Vec<ExpressionDef>,
}

/// Binary K x M correspondence matrix: `P[k][m] = 1` iff AU `m` belongs
/// to the prototypical configuration of expression `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMatrix {
    pub p: Tensor,
    pub expr_order: Vec<String>,
    pub au_order: Vec<u32>,
}

/// The 7 basic expression categories (DFEW label space).
pub const EXPR_7: [&str; 7] = [
    "Happiness", "Sadness", "Neutral", "Anger", "Surprise", "Disgust", "Fear",
];

/// The 11-category label space (MAFW), extending the basic seven.
pub const EXPR_11: [&str; 11] = [
    "Happiness", "Sadness", "Neutral", "Anger", "Surprise", "Disgust", "Fear",
    "Contempt", "Anxiety", "Helplessness", "Disappointment",
];

/// The 12 AUs annotated in BP4D.
pub const BP4D_AUS: [u32; 12] = [1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24];

/// The 8 AUs commonly evaluated on DISFA.
pub const DISFA_AUS: [u32; 8] = [1, 2, 4, 6, 9, 12, 25, 26];

const AU_TABLE: [(u32, &str); 17] = [
    (1, "inner brow raiser"),
    (2, "outer brow raiser"),
    (4, "brow lowerer"),
    (5, "upper lid raiser"),
    (6, "cheek raiser"),
    (7, "lid tightener"),
    (9, "nose wrinkler"),
    (10, "upper lip raiser"),
    (12, "lip corner puller"),
    (14, "dimpler"),
    (15, "lip corner depressor"),
    (17, "chin raiser"),
    (20, "lip stretcher"),
    (23, "lip tightener"),
    (24, "lip pressor"),
    (25, "lips part"),
    (26, "jaw drop"),
];

const EXPRESSION_TABLE: [(&str, &[u32], &str); 11] = [
    ("Happiness", &[6, 12], "cheek raiser, lip corner puller"),
    (
        "Sadness",
        &[1, 4, 15],
        "inner brow raiser, brow lowerer, lip corner depressor",
    ),
    (
        "Neutral",
        &[],
        "relaxed facial muscles, no significant action units",
    ),
    (
        "Anger",
        &[4, 5, 7, 23],
        "brow lowerer, upper lid raiser, lid tightener, lip tightener",
    ),
    (
        "Surprise",
        &[1, 2, 5, 26],
        "inner brow raiser, outer brow raiser, upper lid raiser, jaw drop",
    ),
    (
        "Disgust",
        &[9, 10, 15],
        "nose wrinkler, upper lip raiser, lip corner depressor",
    ),
    (
        "Fear",
        &[1, 2, 4, 5, 7, 20, 26],
        "inner brow raiser, outer brow raiser, brow lowerer, upper lid raiser, lid tightener, lip stretcher, jaw drop",
    ),
    ("Contempt", &[12, 14], "lip corner puller, dimpler"),
    (
        "Anxiety",
        &[1, 4, 20, 25],
        "inner brow raiser, brow lowerer, lip stretcher, lips part",
    ),
    (
        "Helplessness",
        &[1, 4, 15, 26],
        "inner brow raiser, brow lowerer, lip corner depressor, jaw drop",
    ),
    (
        "Disappointment",
        &[1, 4, 15, 25],
        "inner brow raiser, brow lowerer, slight lip corner depressor, lips part",
    ),
];

impl FacsTable {
    pub fn au(&self, au_id: u32) -> Result<&ActionUnitDef> {
        self.aus
            .iter()
            .find(|a| a.au_id == au_id)
            .ok_or_else(|| Error::Lookup(format!("AU{au_id}")))
    }

    pub fn expression(&self, name: &str) -> Result<&ExpressionDef> {
        self.expressions
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// Serialize as the plain-text exchange format: one record per line,
    /// tab-separated. AU lines: `AU<TAB>id<TAB>description`. Expression
    /// lines: `EXPR<TAB>name<TAB>id+id+...<TAB>compound<TAB>standalone<TAB>word`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for a in &self.aus {
            out.push_str(&format!("AU\t{}\t{}\n", a.au_id, a.description));
        }
        for e in &self.expressions {
            let combo = e
                .au_combination
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join("+");
            out.push_str(&format!(
                "EXPR\t{}\t{}\t{}\t{}\t{}\n",
                e.name, combo, e.compound_description, e.standalone_description, e.word_description
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<FacsTable> {
        let mut aus = Vec::new();
        let mut expressions = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.first() {
                Some(&"AU") if fields.len() == 3 => {
                    let id: u32 = fields[1].parse().map_err(|_| {
                        Error::Format(format!("line {}: bad AU id `{}`", lineno + 1, fields[1]))
                    })?;
                    if fields[2].is_empty() {
                        return Err(Error::Format(format!(
                            "line {}: empty AU description",
                            lineno + 1
                        )));
                    }
                    aus.push(ActionUnitDef {
                        au_id: id,
                        description: fields[2].to_string(),
                    });
                }
                Some(&"EXPR") if fields.len() == 6 => {
                    let combo = if fields[2].is_empty() {
                        BTreeSet::new()
                    } else {
                        fields[2]
                            .split('+')
                            .map(|s| {
                                s.parse::<u32>().map_err(|_| {
                                    Error::Format(format!(
                                        "line {}: bad AU id `{s}` in combination",
                                        lineno + 1
                                    ))
                                })
                            })
                            .collect::<Result<BTreeSet<u32>>>()?
                    };
                    expressions.push(ExpressionDef {
                        name: fields[1].to_string(),
                        au_combination: combo,
                        compound_description: fields[3].to_string(),
                        standalone_description: fields[4].to_string(),
                        word_description: fields[5].to_string(),
                    });
                }
                _ => {
                    return Err(Error::Format(format!(
                        "line {}: unrecognized record `{line}`",
                        lineno + 1
                    )))
                }
            }
        }
        let table = FacsTable { aus, expressions };
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<FacsTable> {
        FacsTable::from_text(&fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.aus {
            if !seen.insert(a.au_id) {
                return Err(Error::Format(format!("duplicate AU id {}", a.au_id)));
            }
        }
        for e in &self.expressions {
            for id in &e.au_combination {
                if !seen.contains(id) {
                    return Err(Error::Format(format!(
                        "expression {} references unknown AU{id}",
                        e.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The built-in description table covering 17 AUs and 11 expressions.
pub fn builtin_facs_table() -> FacsTable {
    let aus = AU_TABLE
        .iter()
        .map(|&(id, d)| ActionUnitDef {
            au_id: id,
            description: d.to_string(),
        })
        .collect();
    let expressions = EXPRESSION_TABLE
        .iter()
        .map(|&(name, combo, compound)| {
            let word = name.to_lowercase();
            ExpressionDef {
                name: name.to_string(),
                au_combination: combo.iter().copied().collect(),
                compound_description: compound.to_string(),
                standalone_description: format!("a facial expression of {word}"),
                word_description: word,
            }
        })
        .collect();
    FacsTable { aus, expressions }
}

/// Build the binary prior matrix for the given expression and AU lists.
/// Each expression's AU combination is intersected with `au_list`.
pub fn build_prior_matrix(
    table: &FacsTable,
    expr_list: &[&str],
    au_list: &[u32],
) -> Result<PriorMatrix> {
    for &id in au_list {
        table.au(id)?;
    }
    let mut p = Tensor::zeros(expr_list.len(), au_list.len());
    for (k, &name) in expr_list.iter().enumerate() {
        let expr = table.expression(name)?;
        for (m, &id) in au_list.iter().enumerate() {
            if expr.au_combination.contains(&id) {
                p.set(k, m, 1.0);
            }
        }
    }
    Ok(PriorMatrix {
        p,
        expr_order: expr_list.iter().map(|s| s.to_string()).collect(),
        au_order: au_list.to_vec(),
    })
}

/// Row normalization of the prior: each nonzero row sums to 1, all-zero
/// rows (Neutral) stay at zero, which a downstream row softmax reads as
/// "no prior preference".
pub fn normalize_rows(prior: &PriorMatrix) -> Tensor {
    let p = &prior.p;
    let mut w = Tensor::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let sum: f64 = p.row(r).iter().sum();
        if sum > 0.0 {
            for c in 0..p.cols() {
                w.set(r, c, p.at(r, c) / sum);
            }
        }
    }
    w
}
