//! Plain-text checkpoints with bit-exact floats.
//!
//! Every `f64` is written as the 16 hex digits of its IEEE-754 bit pattern,
//! so a save/load cycle reproduces parameters exactly. The layout is
//! line oriented:
//!
//! ```text
//! otcil-checkpoint 1
//! stage <completed tasks>
//! input_dim <n>
//! hidden <h1,h2,...|none>
//! embed_dim <d>
//! logit_scale <hex>
//! layer <i> <rows> <cols>
//! <rows lines of cols hex values>
//! bias <i> <len>
//! <one line of len hex values>
//! head <rows> <cols>
//! <rows lines of cols hex values>
//! memory <policy|none> <classes>
//! class <label> <count> <dim>
//! <count lines of dim hex values>
//! end
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::datasets::Instance;
use crate::diffnet::{Dense, EmbeddingConfig, Model};
use crate::error::{Error, Result};
use crate::memory::{BudgetPolicy, ExemplarStore};

const MAGIC: &str = "otcil-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub completed_tasks: usize,
    pub model: Model,
    pub memory: Option<ExemplarStore>,
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn write_row<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let row: Vec<String> = values.into_iter().map(hex).collect();
    writeln!(w, "{}", row.join(" "))?;
    Ok(())
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    for row in m.rows() {
        write_row(w, row.iter().copied())?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = &self.model.config;
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "stage {}", self.completed_tasks)?;
        writeln!(w, "input_dim {}", cfg.input_dim)?;
        if cfg.hidden_dims.is_empty() {
            writeln!(w, "hidden none")?;
        } else {
            let dims: Vec<String> = cfg.hidden_dims.iter().map(usize::to_string).collect();
            writeln!(w, "hidden {}", dims.join(","))?;
        }
        writeln!(w, "embed_dim {}", cfg.embed_dim)?;
        writeln!(w, "logit_scale {}", hex(self.model.logit_scale))?;
        for (i, layer) in self.model.layers.iter().enumerate() {
            writeln!(w, "layer {i} {} {}", layer.weight.nrows(), layer.weight.ncols())?;
            write_matrix(&mut w, &layer.weight)?;
            writeln!(w, "bias {i} {}", layer.bias.len())?;
            write_row(&mut w, layer.bias.iter().copied())?;
        }
        let head = &self.model.head;
        writeln!(w, "head {} {}", head.nrows(), head.ncols())?;
        write_matrix(&mut w, head)?;
        match &self.memory {
            None => writeln!(w, "memory none 0")?,
            Some(store) => {
                writeln!(w, "memory {} {}", store.policy, store.classes.len())?;
                for (label, list) in &store.classes {
                    let dim = list.first().map_or(0, |i| i.features.len());
                    writeln!(w, "class {label} {} {dim}", list.len())?;
                    for inst in list {
                        write_row(&mut w, inst.features.iter().copied())?;
                    }
                }
            }
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = Lines {
            inner: reader.lines(),
            line: 0,
        };
        let header = lines.fields()?;
        if header.len() != 2 || header[0] != MAGIC {
            return Err(lines.error("not a checkpoint file"));
        }
        if header[1] != VERSION.to_string() {
            return Err(lines.error(&format!("unsupported checkpoint version {}", header[1])));
        }
        let completed_tasks = lines.keyed_usize("stage")?;
        let input_dim = lines.keyed_usize("input_dim")?;
        let hidden = lines.keyed("hidden")?;
        let hidden_dims = if hidden == "none" {
            Vec::new()
        } else {
            hidden
                .split(',')
                .map(|v| v.parse().map_err(|_| lines.error("bad hidden size")))
                .collect::<Result<Vec<usize>>>()?
        };
        let embed_dim = lines.keyed_usize("embed_dim")?;
        let scale_text = lines.keyed("logit_scale")?;
        let logit_scale = lines.parse_hex(&scale_text)?;
        let config = EmbeddingConfig::new(input_dim, hidden_dims, embed_dim);
        config.validate()?;
        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
            let dims = lines.tagged("layer", 3)?;
            if dims != [i, fan_out, fan_in] {
                return Err(lines.error("layer shape does not match the architecture"));
            }
            let weight = lines.matrix(fan_out, fan_in)?;
            let dims = lines.tagged("bias", 2)?;
            if dims != [i, fan_out] {
                return Err(lines.error("bias length does not match the architecture"));
            }
            let bias = Array1::from(lines.row(fan_out)?);
            layers.push(Dense { weight, bias });
        }
        let dims = lines.tagged("head", 2)?;
        if dims[0] != embed_dim {
            return Err(lines.error("head rows must equal the embedding width"));
        }
        let head = lines.matrix(dims[0], dims[1])?;

        let mem = lines.fields()?;
        if mem.len() != 3 || mem[0] != "memory" {
            return Err(lines.error("expected memory line"));
        }
        let memory = if mem[1] == "none" {
            None
        } else {
            let policy: BudgetPolicy = mem[1].parse()?;
            let count: usize = mem[2].parse().map_err(|_| lines.error("bad class count"))?;
            let mut store = ExemplarStore::new(policy);
            for _ in 0..count {
                let dims = lines.tagged("class", 3)?;
                let (label, n, dim) = (dims[0], dims[1], dims[2]);
                let mut list = Vec::with_capacity(n);
                for _ in 0..n {
                    list.push(Instance {
                        features: lines.row(dim)?,
                        label,
                    });
                }
                store.insert_class(label, list);
            }
            Some(store)
        };
        if lines.fields()? != ["end"] {
            return Err(lines.error("expected end marker"));
        }
        Ok(Self {
            completed_tasks,
            model: Model {
                config,
                layers,
                head,
                logit_scale,
            },
            memory,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

struct Lines<I> {
    inner: I,
    line: u64,
}

impl<I: Iterator<Item = std::io::Result<String>>> Lines<I> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            line: self.line,
            message: message.to_string(),
        }
    }

    fn fields(&mut self) -> Result<Vec<String>> {
        self.line += 1;
        match self.inner.next() {
            Some(line) => Ok(line?.split_whitespace().map(str::to_string).collect()),
            None => Err(self.error("unexpected end of file")),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let f = self.fields()?;
        if f.len() != 2 || f[0] != key {
            return Err(self.error(&format!("expected `{key} <value>`")));
        }
        Ok(f[1].clone())
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        self.keyed(key)?
            .parse()
            .map_err(|_| self.error(&format!("bad value for {key}")))
    }

    fn tagged(&mut self, tag: &str, n: usize) -> Result<Vec<usize>> {
        let f = self.fields()?;
        if f.len() != n + 1 || f[0] != tag {
            return Err(self.error(&format!("expected `{tag}` line with {n} numbers")));
        }
        f[1..]
            .iter()
            .map(|v| v.parse().map_err(|_| self.error("bad integer")))
            .collect()
    }

    fn parse_hex(&self, s: &str) -> Result<f64> {
        if s.len() != 16 {
            return Err(self.error(&format!("bad float `{s}`")));
        }
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|_| self.error(&format!("bad float `{s}`")))
    }

    fn row(&mut self, n: usize) -> Result<Vec<f64>> {
        let f = self.fields()?;
        if f.len() != n {
            return Err(self.error(&format!("expected {n} values, found {}", f.len())));
        }
        f.iter().map(|v| self.parse_hex(v)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.row(cols)?);
        }
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))
    }
}
