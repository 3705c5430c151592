//! Tabular action values over grade-history trees.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cohort::{encode_history, Encoded, Grade, PatientState, DECISION_STATES_PER_CLASS, N_CLASSES};
use crate::error::{Error, Result};

/// Action values and visit counts for the decision states of one tree.
/// Rows are grade histories in the positional encoding of
/// [`encode_history`].
#[derive(Debug, Clone, PartialEq)]
pub struct Slab {
    pub n_actions: usize,
    pub q: Vec<f64>,
    pub n: Vec<u32>,
    /// N(s) = Σ_d n(s, d).
    pub visits: Vec<u64>,
}

impl Slab {
    pub fn new(rows: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            q: vec![0.0; rows * n_actions],
            n: vec![0; rows * n_actions],
            visits: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.visits.len()
    }

    pub fn q_row(&self, row: usize) -> &[f64] {
        &self.q[row * self.n_actions..(row + 1) * self.n_actions]
    }

    pub fn n_row(&self, row: usize) -> &[u32] {
        &self.n[row * self.n_actions..(row + 1) * self.n_actions]
    }

    /// Incremental-mean backup of return `g` into `(row, action)`.
    pub fn backup(&mut self, row: usize, action: usize, g: f64) {
        let k = row * self.n_actions + action;
        self.n[k] += 1;
        self.visits[row] += 1;
        self.q[k] = incremental_mean(self.q[k], self.n[k] as f64, g);
    }

    /// Greedy action among visited ones; ties go to the lowest index.
    pub fn argmax_visited(&self, row: usize) -> Option<usize> {
        let q = self.q_row(row);
        let n = self.n_row(row);
        let mut best: Option<usize> = None;
        for a in 0..self.n_actions {
            if n[a] > 0 && best.is_none_or(|b| q[a] > q[b]) {
                best = Some(a);
            }
        }
        best
    }
}

/// Running mean after the `n`-th sample: q + (g − q)/n.
pub fn incremental_mean(q: f64, n: f64, g: f64) -> f64 {
    q + (g - q) / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTableHeader {
    pub format: String,
    pub version: u32,
    pub n_classes: usize,
    pub states_per_class: usize,
    pub n_actions: usize,
    /// Classes whose slabs follow the header, in file order.
    pub classes: Vec<usize>,
    /// Episodes completed per stored class.
    pub episodes: Vec<u64>,
    pub seed: u64,
    pub config_hash: String,
    /// Training configuration as JSON, for provenance.
    pub config: serde_json::Value,
}

const MAGIC: &[u8; 8] = b"MIPDQTB1";

/// Population action values, one slab per trained covariate class.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub header: QTableHeader,
    pub slabs: Vec<Option<Slab>>,
}

impl QTable {
    pub fn new(n_actions: usize, seed: u64, config: serde_json::Value) -> Self {
        let config_hash = hash_json(&config);
        Self {
            header: QTableHeader {
                format: "mipd-qtable".into(),
                version: 1,
                n_classes: N_CLASSES,
                states_per_class: DECISION_STATES_PER_CLASS,
                n_actions,
                classes: Vec::new(),
                episodes: Vec::new(),
                seed,
                config_hash,
                config,
            },
            slabs: vec![None; N_CLASSES],
        }
    }

    pub fn n_actions(&self) -> usize {
        self.header.n_actions
    }

    /// Stores a trained slab for `class`, replacing any previous one.
    pub fn insert(&mut self, class: usize, slab: Slab, episodes: u64) -> Result<()> {
        if class >= N_CLASSES {
            return Err(Error::InvalidInput(format!("class {class} >= {N_CLASSES}")));
        }
        if slab.n_actions != self.header.n_actions || slab.rows() != DECISION_STATES_PER_CLASS {
            return Err(Error::Dimension {
                what: "slab",
                expected: DECISION_STATES_PER_CLASS * self.header.n_actions,
                got: slab.rows() * slab.n_actions,
            });
        }
        if let Some(i) = self.header.classes.iter().position(|&c| c == class) {
            self.header.episodes[i] = episodes;
        } else {
            self.header.classes.push(class);
            self.header.episodes.push(episodes);
        }
        self.slabs[class] = Some(slab);
        Ok(())
    }

    pub fn slab(&self, class: usize) -> Option<&Slab> {
        self.slabs.get(class).and_then(|s| s.as_ref())
    }

    /// Slab and row of a decision state.
    pub fn locate(&self, state: &PatientState) -> Result<(&Slab, usize)> {
        let class = state.class.index();
        let slab = self
            .slab(class)
            .ok_or_else(|| Error::MissingPrerequisite(format!("no action values for class {class}")))?;
        match encode_history(&state.grades)? {
            Encoded::Decision(row) => Ok((slab, row)),
            Encoded::Leaf => Err(Error::LeafState),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = self.header.clone();
        let mut order: Vec<(usize, u64)> = header.classes.iter().copied().zip(header.episodes.iter().copied()).collect();
        order.sort_unstable();
        header.classes = order.iter().map(|x| x.0).collect();
        header.episodes = order.iter().map(|x| x.1).collect();
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for &c in &header.classes {
            let slab = self.slabs[c].as_ref().expect("listed class has a slab");
            let mut buf = Vec::with_capacity(slab.q.len() * 12 + slab.visits.len() * 8);
            for q in &slab.q {
                buf.extend_from_slice(&q.to_le_bytes());
            }
            for n in &slab.n {
                buf.extend_from_slice(&n.to_le_bytes());
            }
            for v in &slab.visits {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidInput("not a QTable file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: QTableHeader = serde_json::from_slice(&json)?;
        if header.states_per_class != DECISION_STATES_PER_CLASS || header.n_classes != N_CLASSES {
            return Err(Error::Dimension {
                what: "QTable states per class",
                expected: DECISION_STATES_PER_CLASS,
                got: header.states_per_class,
            });
        }
        let mut slabs = vec![None; N_CLASSES];
        let (rows, a) = (header.states_per_class, header.n_actions);
        for &c in &header.classes {
            if c >= N_CLASSES {
                return Err(Error::InvalidInput(format!("class {c} >= {N_CLASSES}")));
            }
            let mut bytes = vec![0u8; rows * a * 12 + rows * 8];
            r.read_exact(&mut bytes)?;
            let (qb, rest) = bytes.split_at(rows * a * 8);
            let (nb, vb) = rest.split_at(rows * a * 4);
            slabs[c] = Some(Slab {
                n_actions: a,
                q: qb.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
                n: nb.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect(),
                visits: vb.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect(),
            });
        }
        Ok(Self { header, slabs })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    /// CSV of `q(s, ·)` and visit counts for one state: `dose_index,dose,q,n`.
    pub fn write_row_csv<W: Write>(&self, state: &PatientState, doses: &[f64], mut w: W) -> Result<()> {
        let (slab, row) = self.locate(state)?;
        writeln!(w, "dose_index,dose_per_m2,q,n")?;
        for (a, (q, n)) in slab.q_row(row).iter().zip(slab.n_row(row)).enumerate() {
            writeln!(w, "{a},{},{q},{n}", doses.get(a).copied().unwrap_or(f64::NAN))?;
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON text, hex encoded.
pub fn hash_json(v: &serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Grade history → row for trees rooted below the population root.
pub fn row_of(suffix: &[Grade]) -> Result<usize> {
    match encode_history(suffix)? {
        Encoded::Decision(r) => Ok(r),
        Encoded::Leaf => Err(Error::LeafState),
    }
}
