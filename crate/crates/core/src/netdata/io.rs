//! Text formats: partition files, subject manifests, weight matrices and
//! node exclusion lists. All are comma-delimited; `#` starts a comment line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use csv::StringRecord;
use nalgebra::DMatrix;

use super::{fisher_z, CellPartition, NetworkPopulation, NodeSet, SubjectNetwork};
use crate::error::{Error, Result};

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// All non-empty records with their 1-based line numbers.
fn records(path: &Path) -> Result<Vec<(usize, StringRecord)>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value '{field}'")));
    }
    Ok(v)
}

/// Node ids and community labels from a `node_id,community_id` file.
#[derive(Debug, Clone)]
pub struct PartitionFile {
    pub nodes: NodeSet,
    pub partition: CellPartition,
}

pub fn read_partition(path: impl AsRef<Path>) -> Result<PartitionFile> {
    let path = path.as_ref();
    let mut recs = records(path)?;
    if let Some((_, first)) = recs.first() {
        let h = first.get(0).unwrap_or("").to_ascii_lowercase();
        if h == "node_id" || h == "node" {
            recs.remove(0);
        }
    }
    if recs.is_empty() {
        return Err(Error::parse(path, 0, "no partition entries"));
    }
    let mut ids = Vec::with_capacity(recs.len());
    let mut labels = Vec::with_capacity(recs.len());
    for (line, rec) in &recs {
        if rec.len() != 2 {
            return Err(Error::parse(
                path,
                *line,
                format!("expected node_id,community_id but found {} fields", rec.len()),
            ));
        }
        ids.push(rec[0].to_string());
        labels.push(rec[1].to_string());
    }
    let nodes = NodeSet::new(ids).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let partition =
        CellPartition::from_names(&labels).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    Ok(PartitionFile { nodes, partition })
}

/// Write a partition file. `provenance` pairs become `# key: value` lines.
pub fn write_partition(
    path: impl AsRef<Path>,
    nodes: &NodeSet,
    partition: &CellPartition,
    provenance: &[(String, String)],
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for (k, v) in provenance {
        writeln!(w, "# {k}: {v}").map_err(io)?;
    }
    writeln!(w, "node_id,community_id").map_err(io)?;
    let names = partition.community_names();
    for (id, &l) in nodes.ids().iter().zip(partition.labels()) {
        writeln!(w, "{id},{}", names[l]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One node id per line (a `node_id` header is skipped).
pub fn read_exclusions(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, (_, rec)) in records(path)?.into_iter().enumerate() {
        let id = rec[0].to_string();
        if i == 0 && (id.eq_ignore_ascii_case("node_id") || id.eq_ignore_ascii_case("node")) {
            continue;
        }
        out.push(id);
    }
    Ok(out)
}

/// Read an `n × n` weight matrix in node order. Dense grids and long
/// `i,j,weight` files (optionally with that header) are both accepted;
/// the long form must list every unordered pair at least once.
pub fn read_matrix(path: impl AsRef<Path>, nodes: &NodeSet) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut recs = records(path)?;
    let n = nodes.len();
    let long_header = recs.first().is_some_and(|(_, r)| {
        r.len() == 3 && r[0].eq_ignore_ascii_case("i") && r[1].eq_ignore_ascii_case("j")
    });
    if long_header {
        recs.remove(0);
        return read_long(path, &recs, nodes);
    }
    let dense = recs.len() == n && recs.iter().all(|(_, r)| r.len() == n);
    if dense {
        let mut w = DMatrix::zeros(n, n);
        for (i, (line, rec)) in recs.iter().enumerate() {
            for (j, field) in rec.iter().enumerate() {
                if i != j {
                    w[(i, j)] = parse_f64(path, *line, field)?;
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (w[(i, j)] - w[(j, i)]).abs() > 1e-8 {
                    return Err(Error::parse(
                        path,
                        recs[i].0,
                        format!("matrix is not symmetric at ({},{})", nodes.ids()[i], nodes.ids()[j]),
                    ));
                }
            }
        }
        return Ok(w);
    }
    if recs.iter().all(|(_, r)| r.len() == 3) {
        return read_long(path, &recs, nodes);
    }
    Err(Error::parse(
        path,
        recs.first().map_or(0, |r| r.0),
        format!("expected a {n}x{n} grid or i,j,weight rows"),
    ))
}

fn read_long(path: &Path, recs: &[(usize, StringRecord)], nodes: &NodeSet) -> Result<DMatrix<f64>> {
    let n = nodes.len();
    let mut w = DMatrix::from_element(n, n, f64::NAN);
    for (line, rec) in recs {
        let lookup = |s: &str| {
            nodes
                .index_of(s)
                .ok_or_else(|| Error::parse(path, *line, format!("unknown node '{s}'")))
        };
        let (i, j) = (lookup(&rec[0])?, lookup(&rec[1])?);
        let v = parse_f64(path, *line, &rec[2])?;
        if i == j {
            continue;
        }
        for (a, b) in [(i, j), (j, i)] {
            let old = w[(a, b)];
            if !old.is_nan() && (old - v).abs() > 1e-8 {
                return Err(Error::parse(
                    path,
                    *line,
                    format!("conflicting weights {old} and {v} for pair ({},{})", &rec[0], &rec[1]),
                ));
            }
            w[(a, b)] = v;
        }
    }
    for i in 0..n {
        w[(i, i)] = 0.0;
        for j in (i + 1)..n {
            if w[(i, j)].is_nan() {
                return Err(Error::parse(
                    path,
                    0,
                    format!("missing weight for pair ({},{})", nodes.ids()[i], nodes.ids()[j]),
                ));
            }
        }
    }
    Ok(w)
}

/// A manifest row: subject id, resolved matrix path, covariates without the
/// intercept.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub matrix_path: PathBuf,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    /// Names of the manifest's covariate columns.
    pub covariate_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

/// Read `subject_id,matrix_path,<covariates>`. The header row is required;
/// matrix paths are relative to the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let recs = records(path)?;
    let Some((hline, header)) = recs.first() else {
        return Err(Error::parse(path, 0, "empty manifest"));
    };
    if header.len() < 2
        || !header[0].eq_ignore_ascii_case("subject_id")
        || !header[1].eq_ignore_ascii_case("matrix_path")
    {
        return Err(Error::parse(
            path,
            *hline,
            "header must start with subject_id,matrix_path",
        ));
    }
    let covariate_names: Vec<String> = header.iter().skip(2).map(String::from).collect();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (line, rec) in &recs[1..] {
        if rec.len() != header.len() {
            return Err(Error::parse(
                path,
                *line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let covariates = rec
            .iter()
            .skip(2)
            .map(|f| parse_f64(path, *line, f))
            .collect::<Result<Vec<_>>>()?;
        entries.push(ManifestEntry {
            subject_id: rec[0].to_string(),
            matrix_path: base.join(&rec[1]),
            covariates,
        });
    }
    Ok(Manifest {
        covariate_names,
        entries,
    })
}

/// Options applied while assembling a population from files.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Node ids dropped from every matrix and from the partition.
    pub exclude_nodes: Vec<String>,
    /// Community labels whose nodes are all dropped.
    pub exclude_communities: Vec<String>,
    /// Apply the Fisher z-transform to every off-diagonal weight.
    pub fisher: bool,
}

/// Partition + manifest + matrices → population, with an intercept column
/// named `intercept` prepended to the manifest covariates.
pub fn load_population(
    manifest_path: impl AsRef<Path>,
    partition_path: impl AsRef<Path>,
    opts: &LoadOptions,
) -> Result<NetworkPopulation> {
    let PartitionFile { nodes, partition } = read_partition(partition_path.as_ref())?;
    let manifest = read_manifest(manifest_path.as_ref())?;

    for id in &opts.exclude_nodes {
        if nodes.index_of(id).is_none() {
            return Err(Error::validation(format!("excluded node '{id}' is not in the partition")));
        }
    }
    for c in &opts.exclude_communities {
        if !partition.community_names().contains(c) {
            return Err(Error::validation(format!("excluded community '{c}' does not exist")));
        }
    }
    let names = partition.community_names();
    let keep: Vec<usize> = (0..nodes.len())
        .filter(|&i| {
            !opts.exclude_nodes.contains(&nodes.ids()[i])
                && !opts.exclude_communities.contains(&names[partition.labels()[i]])
        })
        .collect();
    let kept_ids: Vec<String> = keep.iter().map(|&i| nodes.ids()[i].clone()).collect();
    let kept_labels: Vec<&str> = keep
        .iter()
        .map(|&i| names[partition.labels()[i]].as_str())
        .collect();
    let kept_nodes = NodeSet::new(kept_ids)?;
    let kept_partition = CellPartition::from_names(&kept_labels)?;

    let mut covariate_names = vec!["intercept".to_string()];
    covariate_names.extend(manifest.covariate_names.iter().cloned());

    let mut subjects = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let full = read_matrix(&entry.matrix_path, &nodes)?;
        let mut w = full.select_rows(keep.iter()).select_columns(keep.iter());
        if opts.fisher {
            let n = w.nrows();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        w[(i, j)] = fisher_z(w[(i, j)]).map_err(|e| {
                            Error::parse(&entry.matrix_path, 0, e.to_string())
                        })?;
                    }
                }
            }
        }
        let mut x = vec![1.0];
        x.extend(&entry.covariates);
        subjects.push(SubjectNetwork::new(entry.subject_id.clone(), w, x).map_err(
            |e| match e {
                Error::Validation(m) => Error::parse(&entry.matrix_path, 0, m),
                other => other,
            },
        )?);
    }
    NetworkPopulation::new(kept_nodes, kept_partition, subjects, covariate_names)
}

/// Write a dense matrix with full-precision values.
pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a dense numeric grid of any shape (rows must agree in length).
pub fn read_grid(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let recs = records(path)?;
    let ncols = recs.first().map_or(0, |r| r.1.len());
    let mut data = Vec::with_capacity(recs.len() * ncols);
    for (line, rec) in &recs {
        if rec.len() != ncols {
            return Err(Error::parse(path, *line, format!("expected {ncols} fields")));
        }
        for f in rec.iter() {
            data.push(parse_f64(path, *line, f)?);
        }
    }
    Ok(DMatrix::from_row_slice(recs.len(), ncols, &data))
}

/// Write population matrices plus a manifest and partition file into `dir`.
pub fn write_population(dir: impl AsRef<Path>, pop: &NetworkPopulation) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_partition(dir.join("partition.csv"), pop.nodes(), pop.partition(), &[])?;
    std::fs::create_dir_all(dir.join("matrices")).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join("manifest.csv");
    let io = |e| Error::io(&mpath, e);
    let mut w = BufWriter::new(File::create(&mpath).map_err(io)?);
    let extra = &pop.covariate_names()[1..];
    let mut header = vec!["subject_id".to_string(), "matrix_path".to_string()];
    header.extend(extra.iter().cloned());
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for s in pop.subjects() {
        let rel = format!("matrices/{}.csv", s.id);
        write_matrix(dir.join(&rel), s.weights())?;
        let mut row = vec![s.id.clone(), rel];
        row.extend(s.covariates()[1..].iter().map(|v| v.to_string()));
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;


    #[test]
    fn partition_round_trip() {
        let t = tempfile::tempdir().unwrap();
        let d = t.path();
        let p = d.join("p.csv");
        fs::write(&p, "# from atlas\nnode_id,community_id\na,2\nb,10\nc,2\nd,10\n").unwrap();
        let pf = read_partition(&p).unwrap();
        assert_eq!(pf.partition.community_names(), &["2", "10"]);
        assert_eq!(pf.partition.labels(), &[0, 1, 0, 1]);
        let q = d.join("q.csv");
        write_partition(&q, &pf.nodes, &pf.partition, &[("method".into(), "kmeans".into())]).unwrap();
        let back = read_partition(&q).unwrap();
        assert_eq!(back.partition, pf.partition);
        assert!(fs::read_to_string(&q).unwrap().starts_with("# method: kmeans"));
    }

    #[test]
    fn headerless_partition_and_errors() {
        let t = tempfile::tempdir().unwrap();
        let d = t.path();
        let p = d.join("p.csv");
        fs::write(&p, "0,1\n1,1\n2,2\n").unwrap();
        assert_eq!(read_partition(&p).unwrap().partition.n_cells(), 2);
        fs::write(&p, "0,1\n1,-1\n").unwrap();
        assert!(read_partition(&p).is_err());
        fs::write(&p, "0,1\n0,2\n").unwrap();
        assert!(read_partition(&p).is_err());
        fs::write(&p, "0,1,3\n1,2\n").unwrap();
        let err = read_partition(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn dense_and_long_matrices_agree() {
        let t = tempfile::tempdir().unwrap();
        let d = t.path();
        let nodes = NodeSet::new(vec!["x".into(), "y".into(), "z".into(), "w".into()]).unwrap();
        let dense = d.join("d.csv");
        fs::write(&dense, "9,0.1,0.2,0.3\n0.1,9,0.4,0.5\n0.2,0.4,9,0.6\n0.3,0.5,0.6,9\n").unwrap();
        let long = d.join("l.csv");
        fs::write(&long, "i,j,weight\nx,y,0.1\nx,z,0.2\nw,x,0.3\ny,z,0.4\ny,w,0.5\nz,w,0.6\nz,y,0.4\n").unwrap();
        let a = read_matrix(&dense, &nodes).unwrap();
        let b = read_matrix(&long, &nodes).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[(0, 0)], 0.0);
    }

    #[test]
    fn matrix_errors() {
        let t = tempfile::tempdir().unwrap();
        let d = t.path();
        let nodes = NodeSet::numbered(3).unwrap();
        let f = d.join("m.csv");
        fs::write(&f, "0,1,2\n1.5,0,3\n2,3,0\n").unwrap();
        assert!(read_matrix(&f, &nodes).is_err());
        fs::write(&f, "i,j,weight\n0,1,0.1\n1,0,0.2\n0,2,0.1\n1,2,0\n").unwrap();
        assert!(read_matrix(&f, &nodes).is_err());
        fs::write(&f, "i,j,weight\n0,1,0.1\n0,2,0.1\n").unwrap();
        let e = read_matrix(&f, &nodes).unwrap_err().to_string();
        assert!(e.contains("missing"), "{e}");
        assert!(read_matrix(d.join("nope.csv"), &nodes)
            .unwrap_err()
            .to_string()
            .contains("nope.csv"));
    }

    #[test]
    fn load_with_exclusions_and_fisher() {
        let t = tempfile::tempdir().unwrap();
        let d = t.path();
        fs::write(d.join("part.csv"), "0,1\n1,1\n2,2\n3,2\n4,3\n").unwrap();
        let m = "0,0.5,0.1,0.2,0.3\n0.5,0,0.1,0.2,0.3\n0.1,0.1,0,0.2,0.3\n0.2,0.2,0.2,0,0.3\n0.3,0.3,0.3,0.3,0\n";
        fs::write(d.join("a.csv"), m).unwrap();
        fs::write(d.join("b.csv"), m).unwrap();
        fs::write(d.join("man.csv"), "subject_id,matrix_path,group\ns1,a.csv,0\ns2,b.csv,1\n").unwrap();
        let opts = LoadOptions {
            exclude_nodes: vec!["4".into()],
            fisher: true,
            ..Default::default()
        };
        let pop = load_population(d.join("man.csv"), d.join("part.csv"), &opts).unwrap();
        assert_eq!(pop.nodes().len(), 4);
        assert_eq!(pop.partition().n_communities(), 2);
        assert_eq!(pop.covariate_names(), &["intercept", "group"]);
        assert_eq!(pop.subjects()[1].covariates(), &[1.0, 1.0]);
        assert!((pop.subjects()[0].weights()[(0, 1)] - 0.5f64.atanh()).abs() < 1e-15);

        fs::write(d.join("b.csv"), m.replace("0.5", "1.0")).unwrap();
        assert!(load_population(d.join("man.csv"), d.join("part.csv"), &opts).is_err());

        let opts = LoadOptions {
            exclude_communities: vec!["2".into()],
            ..Default::default()
        };
        let pop = load_population(d.join("man.csv"), d.join("part.csv"), &opts).unwrap();
        assert_eq!(pop.nodes().ids(), &["0", "1", "4"]);
    }

    #[test]
    fn population_round_trip() {
        let t = tempfile::tempdir().unwrap();
        let d = t.path();
        fs::write(d.join("part.csv"), "0,1\n1,1\n2,2\n").unwrap();
        fs::write(d.join("a.csv"), "0,1,2\n1,0,3\n2,3,0\n").unwrap();
        fs::write(d.join("man.csv"), "subject_id,matrix_path,age\ns1,a.csv,30\ns2,a.csv,40.5\n").unwrap();
        let pop = load_population(d.join("man.csv"), d.join("part.csv"), &LoadOptions::default()).unwrap();
        let out = d.join("out");
        write_population(&out, &pop).unwrap();
        let back = load_population(out.join("manifest.csv"), out.join("partition.csv"), &LoadOptions::default()).unwrap();
        assert_eq!(back.subjects(), pop.subjects());
    }
}
