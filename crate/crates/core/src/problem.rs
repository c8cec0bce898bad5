//! Benchmark problems.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The marker line the candidate replaces.
pub const INSERT_MARKER: &str = "[insert]";

/// Libraries in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Library {
    SciPy,
    PyTorch,
    Sklearn,
    Matplotlib,
    Pandas,
    NumPy,
    TensorFlow,
}

impl Library {
    pub const ALL: [Library; 7] = [
        Library::SciPy,
        Library::PyTorch,
        Library::Sklearn,
        Library::Matplotlib,
        Library::Pandas,
        Library::NumPy,
        Library::TensorFlow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Library::SciPy => "SciPy",
            Library::PyTorch => "PyTorch",
            Library::Sklearn => "Sklearn",
            Library::Matplotlib => "Matplotlib",
            Library::Pandas => "Pandas",
            Library::NumPy => "NumPy",
            Library::TensorFlow => "TensorFlow",
        }
    }

    /// Problem counts per library in the full DS-1000 release.
    pub fn ds1000_size(self) -> usize {
        match self {
            Library::SciPy => 106,
            Library::PyTorch => 68,
            Library::Sklearn => 115,
            Library::Matplotlib => 155,
            Library::Pandas => 291,
            Library::NumPy => 220,
            Library::TensorFlow => 45,
        }
    }
}

impl fmt::Display for Library {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLibrary(pub String);

impl fmt::Display for UnknownLibrary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown library `{}`", self.0)
    }
}

impl std::error::Error for UnknownLibrary {}

impl FromStr for Library {
    type Err = UnknownLibrary;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "scipy" => Library::SciPy,
            "pytorch" | "torch" => Library::PyTorch,
            "sklearn" | "scikit-learn" | "scikit_learn" => Library::Sklearn,
            "matplotlib" | "plt" => Library::Matplotlib,
            "pandas" | "pd" => Library::Pandas,
            "numpy" | "np" => Library::NumPy,
            "tensorflow" | "tf" => Library::TensorFlow,
            _ => return Err(UnknownLibrary(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemType {
    #[default]
    Completion,
    Insertion,
}

/// How a candidate becomes the program the runner executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    /// The candidate replaces the marker line; tests run afterwards in the
    /// same namespace.
    #[default]
    Inline,
    /// The program only binds the candidate source to [`SOLUTION_VARIABLE`]
    /// as a string; the test suite splices and runs it itself (the
    /// DS-1000 `test_execution(solution)` convention).
    SolutionString,
}

impl Evaluation {
    pub fn is_inline(&self) -> bool {
        *self == Evaluation::Inline
    }
}

pub const SOLUTION_VARIABLE: &str = "__solution__";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub library: Library,
    pub description: String,
    /// Program scaffold containing exactly one [`INSERT_MARKER`] line.
    pub code_context: String,
    /// Assertion script run in the program's namespace after it executes.
    pub test_suite: String,
    #[serde(default)]
    pub problem_type: ProblemType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
    #[serde(default, skip_serializing_if = "Evaluation::is_inline")]
    pub evaluation: Evaluation,
}

impl Problem {
    /// Indices of lines that are exactly the insertion marker (surrounding
    /// whitespace ignored).
    pub fn marker_lines(&self) -> Vec<usize> {
        self.code_context
            .split('\n')
            .enumerate()
            .filter(|(_, l)| l.trim() == INSERT_MARKER)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_single_marker(&self) -> bool {
        self.marker_lines().len() == 1
    }
}
