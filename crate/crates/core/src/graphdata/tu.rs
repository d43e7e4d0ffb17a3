//! TUDataset text format.
//!
//! `DS_A.txt` holds `i, j` edge lines with 1-based global node ids,
//! `DS_graph_indicator.txt` the graph id of node `n` on line `n`,
//! `DS_graph_labels.txt` the label of graph `g` on line `g`, and the optional
//! `DS_node_labels.txt` an integer label per node.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Graph, GraphCollection};
use crate::error::{Error, Result};

struct Lines {
    file: String,
    rows: Vec<(usize, String)>,
}

fn read_lines(path: &Path) -> Result<Lines> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| (k + 1, l.trim().to_string()))
        .collect();
    Ok(Lines {
        file: path
            .file_name()
            .map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned()),
        rows,
    })
}

fn parse_int(file: &str, line: usize, field: &str) -> Result<i64> {
    field.trim().parse().map_err(|_| Error::Format {
        file: file.to_string(),
        line,
        message: format!("expected an integer, found `{}`", field.trim()),
    })
}

fn resolve_prefix(dir: &Path) -> Result<(PathBuf, String)> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let expected = dir.join(format!("{name}_A.txt"));
    if expected.is_file() {
        return Ok((dir.to_path_buf(), name));
    }
    if let Ok(entries) = fs::read_dir(dir) {
        let mut found: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()
                    .and_then(|f| f.strip_suffix("_A.txt").map(str::to_string))
            })
            .collect();
        found.sort();
        if found.len() == 1 {
            return Ok((dir.to_path_buf(), found.remove(0)));
        }
    }
    Err(Error::Input {
        path: expected,
        message: "missing required file".into(),
    })
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Input {
            path,
            message: "missing required file".into(),
        })
    }
}

/// Parses a TUDataset directory. Node features are left empty; see
/// [`super::default_features`].
pub fn parse_tu_dataset(dir: impl AsRef<Path>) -> Result<GraphCollection> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Input {
            path: dir.to_path_buf(),
            message: "dataset directory does not exist".into(),
        });
    }
    let (dir, ds) = resolve_prefix(dir)?;
    let a_path = require(dir.join(format!("{ds}_A.txt")))?;
    let ind_path = require(dir.join(format!("{ds}_graph_indicator.txt")))?;
    let gl_path = require(dir.join(format!("{ds}_graph_labels.txt")))?;
    let nl_path = dir.join(format!("{ds}_node_labels.txt"));

    let indicator = read_lines(&ind_path)?;
    let mut node_graph_raw = Vec::with_capacity(indicator.rows.len());
    for (line, text) in &indicator.rows {
        node_graph_raw.push(parse_int(&indicator.file, *line, text)?);
    }
    let graph_ids: Vec<i64> = node_graph_raw.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let graph_count = graph_ids.len();

    // global node -> (graph index, local index)
    let mut local = Vec::with_capacity(node_graph_raw.len());
    let mut sizes = vec![0usize; graph_count];
    for raw in &node_graph_raw {
        let g = graph_ids.binary_search(raw).expect("id collected above");
        local.push((g, sizes[g]));
        sizes[g] += 1;
    }

    let labels_file = read_lines(&gl_path)?;
    if labels_file.rows.len() != graph_count {
        return Err(Error::Format {
            file: labels_file.file.clone(),
            line: labels_file.rows.last().map_or(1, |r| r.0),
            message: format!(
                "{} graph labels for {graph_count} graphs",
                labels_file.rows.len()
            ),
        });
    }
    let mut raw_labels = Vec::with_capacity(graph_count);
    for (line, text) in &labels_file.rows {
        raw_labels.push(parse_int(&labels_file.file, *line, text)?);
    }
    let class_values: Vec<i64> = raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    let a_lines = read_lines(&a_path)?;
    for (line, text) in &a_lines.rows {
        let mut parts = text.split(',');
        let (Some(i), Some(j), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format {
                file: a_lines.file.clone(),
                line: *line,
                message: format!("expected `i, j`, found `{text}`"),
            });
        };
        let i = parse_int(&a_lines.file, *line, i)?;
        let j = parse_int(&a_lines.file, *line, j)?;
        let lookup = |id: i64| -> Result<(usize, usize)> {
            usize::try_from(id)
                .ok()
                .and_then(|id| id.checked_sub(1))
                .and_then(|k| local.get(k).copied())
                .ok_or_else(|| Error::Format {
                    file: a_lines.file.clone(),
                    line: *line,
                    message: format!("node id {id} has no graph indicator"),
                })
        };
        let (gi, li) = lookup(i)?;
        let (gj, lj) = lookup(j)?;
        if gi != gj {
            return Err(Error::Format {
                file: a_lines.file.clone(),
                line: *line,
                message: format!("edge ({i}, {j}) joins two different graphs"),
            });
        }
        edges[gi].push((li, lj));
    }

    let node_labels = if nl_path.is_file() {
        let f = read_lines(&nl_path)?;
        if f.rows.len() != local.len() {
            return Err(Error::Format {
                file: f.file.clone(),
                line: f.rows.last().map_or(1, |r| r.0),
                message: format!("{} node labels for {} nodes", f.rows.len(), local.len()),
            });
        }
        let mut per_graph: Vec<Vec<i64>> = sizes.iter().map(|&n| Vec::with_capacity(n)).collect();
        for ((line, text), &(g, _)) in f.rows.iter().zip(&local) {
            per_graph[g].push(parse_int(&f.file, *line, text)?);
        }
        Some(per_graph)
    } else {
        None
    };

    let mut graphs = Vec::with_capacity(graph_count);
    for (g, edge_list) in edges.into_iter().enumerate() {
        let label = class_values.binary_search(&raw_labels[g]).expect("collected above");
        let mut graph = Graph::new(sizes[g], edge_list, label)?;
        graph.node_labels = node_labels.as_ref().map(|l| l[g].clone());
        graphs.push(graph);
    }
    Ok(GraphCollection {
        name: ds,
        graphs,
        num_classes: class_values.len(),
        feature_dim: 0,
        class_values,
    })
}

/// Writes a collection in TUDataset format as `dir/name_*.txt`.
pub fn write_tu_dataset(collection: &GraphCollection, dir: impl AsRef<Path>, name: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut a = fs::File::create(dir.join(format!("{name}_A.txt")))?;
    let mut ind = fs::File::create(dir.join(format!("{name}_graph_indicator.txt")))?;
    let mut gl = fs::File::create(dir.join(format!("{name}_graph_labels.txt")))?;
    let with_labels = collection.graphs.iter().all(|g| g.node_labels.is_some()) && !collection.is_empty();
    let mut nl = if with_labels {
        Some(fs::File::create(dir.join(format!("{name}_node_labels.txt")))?)
    } else {
        None
    };
    let mut offset = 0;
    for (gi, g) in collection.graphs.iter().enumerate() {
        for &(i, j) in g.edges() {
            writeln!(a, "{}, {}", offset + i + 1, offset + j + 1)?;
            writeln!(a, "{}, {}", offset + j + 1, offset + i + 1)?;
        }
        for _ in 0..g.node_count() {
            writeln!(ind, "{}", gi + 1)?;
        }
        if let (Some(f), Some(labels)) = (nl.as_mut(), g.node_labels.as_ref()) {
            for l in labels {
                writeln!(f, "{l}")?;
            }
        }
        let value = collection.class_values.get(g.label).copied().unwrap_or(g.label as i64);
        writeln!(gl, "{value}")?;
        offset += g.node_count();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::{cycle, star};

    fn write(dir: &Path, name: &str, file: &str, body: &str) {
        fs::write(dir.join(format!("{name}_{file}.txt")), body).unwrap();
    }

    #[test]
    fn smallest_valid_input() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ONE");
        fs::create_dir(&dir).unwrap();
        write(&dir, "ONE", "A", "1, 2\n2, 1\n");
        write(&dir, "ONE", "graph_indicator", "1\n1\n");
        write(&dir, "ONE", "graph_labels", "1\n");
        let c = parse_tu_dataset(&dir).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.graphs[0].node_count(), 2);
        assert_eq!(c.graphs[0].edges(), &[(0, 1)]);
    }

    #[test]
    fn labels_remap_by_sorted_order() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("L");
        fs::create_dir(&dir).unwrap();
        write(&dir, "L", "A", " 1 ,2\n3,  4\n5,6\n");
        write(&dir, "L", "graph_indicator", "1\n1\n2\n2\n3\n3\n");
        write(&dir, "L", "graph_labels", "5\n-1\n5\n");
        let c = parse_tu_dataset(&dir).unwrap();
        assert_eq!(c.labels(), vec![1, 0, 1]);
        assert_eq!(c.class_values, vec![-1, 5]);
        assert_eq!(c.num_classes, 2);
    }

    #[test]
    fn missing_file_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("M");
        fs::create_dir(&dir).unwrap();
        write(&dir, "M", "A", "1, 2\n");
        write(&dir, "M", "graph_indicator", "1\n1\n");
        let err = parse_tu_dataset(&dir).unwrap_err();
        assert!(err.to_string().contains("M_graph_labels.txt"), "{err}");
    }

    #[test]
    fn dangling_node_reports_line() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("D");
        fs::create_dir(&dir).unwrap();
        write(&dir, "D", "A", "1, 2\n2, 1\n2, 9\n");
        write(&dir, "D", "graph_indicator", "1\n1\n");
        write(&dir, "D", "graph_labels", "0\n");
        match parse_tu_dataset(&dir).unwrap_err() {
            Error::Format { file, line, .. } => {
                assert_eq!(file, "D_A.txt");
                assert_eq!(line, 3);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn write_then_parse_preserves_edges() {
        let mut g0 = cycle(5, 0).unwrap();
        g0.node_labels = Some(vec![1, 2, 3, 1, 1]);
        let mut g1 = star(3, 1).unwrap();
        g1.node_labels = Some(vec![0, 0, 0, 0]);
        let c = GraphCollection::new("W", vec![g0, g1]).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("W");
        write_tu_dataset(&c, &dir, "W").unwrap();
        let back = parse_tu_dataset(&dir).unwrap();
        for (a, b) in c.graphs.iter().zip(&back.graphs) {
            assert_eq!(a.edges(), b.edges());
            assert_eq!(a.node_labels, b.node_labels);
            assert_eq!(a.label, b.label);
        }
    }
}
