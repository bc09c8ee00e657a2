//! CSV layouts, their documentation, and gnuplot scripts for them.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::manifest::SCHEMA_VERSION;
use crate::CliError;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Column {
    pub name: &'static str,
    pub description: &'static str,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TableSchema {
    /// File name without the `.csv` suffix.
    pub file: &'static str,
    pub description: &'static str,
    pub columns: &'static [Column],
    /// Plot with logarithmic x axis.
    pub log_x: bool,
}

const fn col(name: &'static str, description: &'static str) -> Column {
    Column { name, description }
}

pub const TABLES: &[TableSchema] = &[
    TableSchema {
        file: "mf-histogram",
        description: "Distance distribution of m⊗m on [0, π] against the model law",
        columns: &[
            col("bin_lo", "left end of the distance bin"),
            col("bin_hi", "right end of the distance bin"),
            col("empirical", "m⊗m mass of pairs with distance in the bin"),
            col("model", "model mass sin^{N−1} of the bin, normalized"),
        ],
        log_x: false,
    },
    TableSchema {
        file: "bg-profile",
        description: "Ball volumes around the centre against the (K, N) model",
        columns: &[
            col("r", "ball radius"),
            col("volume", "normalized mass of the closed ball"),
            col("model_volume", "model volume ∫_0^r s_{K/(N−1)}^{N−1}"),
            col("margin", "v(r)/v(R) − model(r)/model(R), R the largest radius"),
        ],
        log_x: false,
    },
    TableSchema {
        file: "heat-variance",
        description: "Squared transport distance of the heat flow from a Dirac mass",
        columns: &[
            col("point", "index of the starting point"),
            col("t", "time"),
            col("w2_sq", "W₂(P̂_t δ_x, δ_x)²"),
            col("bound", "2 N t"),
            col("ratio", "w2_sq / bound"),
        ],
        log_x: true,
    },
    TableSchema {
        file: "ot-coupling",
        description: "Nonzero entries of the transport plan",
        columns: &[
            col("source", "point index of the first measure"),
            col("target", "point index of the second measure"),
            col("mass", "transported mass"),
        ],
        log_x: false,
    },
    TableSchema {
        file: "theta-curve",
        description: "Contraction rate curve of a pair under the heat flow",
        columns: &[
            col("t", "time"),
            col("w2", "W₂ between the two heat measures"),
            col("rate", "−log(W₂/d)/t"),
            col("half_w2", "W₂ at half resolution (NaN if not run)"),
            col("half_rate", "rate at half resolution (NaN if not run)"),
        ],
        log_x: true,
    },
    TableSchema {
        file: "dichotomy-rows",
        description: "Bounds on the distance between the heat flows from the vertex and from p₀",
        columns: &[
            col("t", "time"),
            col("d_up", "d² minus the product coupling cost"),
            col("product_cost", "∫∫ d² d(ν_p ⊗ ν_o)"),
            col("g", "Kantorovich–Rubinstein lower bound for W₁"),
            col("exact_w2", "exact W₂ (NaN above the size limit)"),
            col("boundary_mass", "radial mass in the outermost cell"),
        ],
        log_x: true,
    },
    TableSchema {
        file: "suspension-invariance-summary",
        description: "cos functional of a space and of its suspension",
        columns: &[
            col("base_m_cos", "M_cos of the base"),
            col("suspension_m_cos", "M_cos of the suspension"),
            col("difference", "suspension minus base"),
        ],
        log_x: false,
    },
    TableSchema {
        file: "almost-rigidity-sweep-table",
        description: "Functional gap and distance-law discrepancy along a perturbation family",
        columns: &[
            col("eta", "perturbation magnitude"),
            col("gap", "gap between M_f and the model value"),
            col("discrepancy", "L¹ distance of the distance histogram to the model law"),
        ],
        log_x: false,
    },
    TableSchema {
        file: "sweep-dichotomy",
        description: "Cos-potential of each base in a dichotomy sweep",
        columns: &[
            col("run", "position in the sweep"),
            col("rho", "circumference / 2π of a circle base, NaN otherwise"),
            col("a", "measured cos-potential"),
            col("closed_form", "sin(πρ)/(πρ) for circle bases, NaN otherwise"),
            col("defect_exponent", "fitted exponent of the √t defect"),
        ],
        log_x: false,
    },
];

pub fn table(file: &str) -> &'static TableSchema {
    TABLES.iter().find(|t| t.file == file).unwrap_or_else(|| panic!("undocumented table {file}"))
}

/// Rows for one documented table.
#[derive(Debug, Clone)]
pub struct Table {
    pub schema: &'static TableSchema,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(file: &str) -> Self {
        Self { schema: table(file), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.schema.columns.len(), "row width for {}", self.schema.file);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.schema.columns.iter().map(|c| c.name).collect();
        s.push_str(&names.join(","));
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<String, CliError> {
        let name = format!("{}.csv", self.schema.file);
        std::fs::write(dir.join(&name), self.to_csv())?;
        Ok(name)
    }
}

/// Gnuplot script plotting every column of each table against the first.
pub fn gnuplot_script(tables: &[Table]) -> String {
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\n");
    for t in tables {
        let _ = writeln!(s, "\n# {}", t.schema.description);
        let _ = writeln!(s, "set title '{}'", t.schema.file);
        let _ = writeln!(s, "{}", if t.schema.log_x { "set logscale x" } else { "unset logscale x" });
        let plots: Vec<String> = (2..=t.schema.columns.len())
            .map(|k| format!("'{}.csv' using 1:{k} with linespoints", t.schema.file))
            .collect();
        let _ = writeln!(s, "plot {}\npause -1", plots.join(", \\\n     "));
    }
    s
}

#[derive(Serialize)]
struct SchemaDump {
    schema_version: u32,
    tables: &'static [TableSchema],
}

/// JSON description of every CSV layout.
pub fn schema_dump() -> String {
    serde_json::to_string_pretty(&SchemaDump { schema_version: SCHEMA_VERSION, tables: TABLES }).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_are_unique_and_documented() {
        for (i, t) in TABLES.iter().enumerate() {
            assert!(TABLES[i + 1..].iter().all(|u| u.file != t.file));
            assert!(t.columns.iter().all(|c| !c.description.is_empty()));
        }
        let dump: serde_json::Value = serde_json::from_str(&schema_dump()).unwrap();
        assert_eq!(dump["schema_version"], SCHEMA_VERSION);
    }

    #[test]
    fn csv_and_script() {
        let mut t = Table::new("bg-profile");
        t.push(vec![0.5, 0.1, 0.1, 0.0]);
        assert_eq!(t.to_csv(), "r,volume,model_volume,margin\n5e-1,1e-1,1e-1,0e0\n");
        let gp = gnuplot_script(&[t]);
        assert!(gp.contains("'bg-profile.csv' using 1:4"));
    }
}
