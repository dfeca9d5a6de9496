//! Model checkpoints: a text header (dimensions and canonical node order)
//! followed by little-endian `f32` parameters, a JSON manifest of shapes, and
//! a TSV export of aggregated embeddings.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{EmbeddingTable, Fanouts, GatLayer};
use crate::error::{Error, Result};
use crate::graph::{Domain, Network, NodeKind};
use crate::linalg::Matrix;
use crate::model::{DomainEncoder, Model, ModelConfig};

const MAGIC: &str = "crossmatch-model 1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub blocks: Vec<BlockShape>,
}

/// A model together with the node order its embedding rows follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub nodes: [Vec<(NodeKind, String)>; 2],
}

impl Checkpoint {
    pub fn new(model: Model, source: &Network, target: &Network) -> Self {
        let list = |n: &Network| n.node_ids().map(|i| (n.kind(i), n.node_key(i).1.to_string())).collect();
        Checkpoint { model, nodes: [list(source), list(target)] }
    }

    /// Errors unless `net`'s node order matches the checkpoint's for its domain.
    pub fn check_network(&self, net: &Network) -> Result<()> {
        let nodes = &self.nodes[net.domain().index()];
        let same = nodes.len() == net.len()
            && net.node_ids().zip(nodes).all(|(i, (k, id))| net.kind(i) == *k && net.node_key(i).1 == id);
        if same {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{} network does not match the checkpoint's node order", net.domain())))
        }
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let mut blocks = Vec::new();
        for d in Domain::BOTH {
            let e = self.model.encoder(d);
            let t = &e.table.vectors;
            blocks.push(BlockShape { name: format!("{d}.base"), rows: t.rows, cols: t.cols });
            for (l, layer) in e.layers.iter().enumerate() {
                let w = &layer.weight;
                blocks.push(BlockShape { name: format!("{d}.layer{}.weight", l + 1), rows: w.rows, cols: w.cols });
                blocks.push(BlockShape {
                    name: format!("{d}.layer{}.attention", l + 1),
                    rows: 1,
                    cols: layer.attention.len(),
                });
            }
        }
        CheckpointManifest { format: MAGIC.to_string(), config: self.model.config, blocks }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.model.config;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "d_in {}", c.d_in)?;
        writeln!(w, "hidden {}", c.hidden)?;
        writeln!(w, "d_out {}", c.d_out)?;
        writeln!(w, "fanout_outer {}", c.fanouts.outer)?;
        writeln!(w, "fanout_inner {}", c.fanouts.inner)?;
        for d in Domain::BOTH {
            let nodes = &self.nodes[d.index()];
            writeln!(w, "nodes {d} {}", nodes.len())?;
            for (k, id) in nodes {
                writeln!(w, "{k}\t{id}")?;
            }
        }
        writeln!(w, "data")?;
        let mut buf = Vec::new();
        for e in &self.model.encoders {
            e.for_each_block(|b| {
                for &v in b {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            });
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        fn next<R: BufRead>(r: &mut R) -> Result<String> {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Checkpoint("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        }
        fn field<R: BufRead>(r: &mut R, name: &str) -> Result<usize> {
            let l = next(r)?;
            l.strip_prefix(name)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("expected `{name}`, got `{l}`")))
        }
        if next(r)? != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let d_in = field(r, "d_in")?;
        let hidden = field(r, "hidden")?;
        let d_out = field(r, "d_out")?;
        let outer = field(r, "fanout_outer")?;
        let inner = field(r, "fanout_inner")?;
        let config = ModelConfig { d_in, hidden, d_out, fanouts: Fanouts { outer, inner } };
        config.validate()?;
        let mut nodes: [Vec<(NodeKind, String)>; 2] = Default::default();
        for d in Domain::BOTH {
            let count = field(r, &format!("nodes {d}"))?;
            let list = &mut nodes[d.index()];
            for _ in 0..count {
                let l = next(r)?;
                let (k, id) = l.split_once('\t').ok_or_else(|| Error::Checkpoint(format!("bad node line `{l}`")))?;
                let k = NodeKind::parse(k).ok_or_else(|| Error::Checkpoint(format!("bad node kind `{k}`")))?;
                list.push((k, id.to_string()));
            }
        }
        if next(r)? != "data" {
            return Err(Error::Checkpoint("missing data marker".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(Error::Checkpoint("parameter data truncated".into()))
            }
        };
        let mut encoders = Vec::with_capacity(2);
        for d in Domain::BOTH {
            let n = nodes[d.index()].len();
            let table = EmbeddingTable { vectors: Matrix::from_vec(n, d_in, take(n * d_in)?) };
            let l1 = GatLayer::new(Matrix::from_vec(hidden, d_in, take(hidden * d_in)?), take(2 * hidden)?)?;
            let l2 = GatLayer::new(Matrix::from_vec(d_out, hidden, take(d_out * hidden)?), take(2 * d_out)?)?;
            encoders.push(DomainEncoder { table, layers: [l1, l2] });
        }
        if bytes.len() % 4 != 0 || values.next().is_some() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        let target = encoders.pop().expect("two encoders");
        let source = encoders.pop().expect("two encoders");
        Ok(Checkpoint { model: Model { config, encoders: [source, target] }, nodes })
    }

    /// Writes `model.bin` and `model.manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        write_atomic(&dir.join("model.bin"), &buf)?;
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        write_atomic(&dir.join("model.manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = std::fs::File::open(dir.join("model.bin"))?;
        Self::read(&mut std::io::BufReader::new(f))
    }
}

/// `kind<TAB>id<TAB>domain<TAB>v1..vd` for every row of `embeddings`.
pub fn write_embeddings_tsv<W: Write>(w: &mut W, net: &Network, embeddings: &Matrix) -> Result<()> {
    for id in net.node_ids() {
        let (k, ext) = net.node_key(id);
        write!(w, "{k}\t{ext}\t{}", net.domain())?;
        for v in embeddings.row(id.ix()) {
            write!(w, "\t{v:.6}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let nodes = vec![(NodeKind::Item, "a".to_string()), (NodeKind::Tag, "t".to_string())];
        let s = Network::from_parts(Domain::Source, nodes.clone(), vec![]).unwrap();
        let t = Network::from_parts(Domain::Target, nodes, vec![]).unwrap();
        let cfg = ModelConfig { d_in: 3, hidden: 2, d_out: 2, fanouts: Fanouts { outer: 2, inner: 1 } };
        let mut model = Model::init(&s, &t, cfg, 9);
        model.round_to_f32();
        let ck = Checkpoint::new(model, &s, &t);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        back.check_network(&s).unwrap();

        buf.pop();
        assert!(Checkpoint::read(&mut buf.as_slice()).is_err());
    }
}
