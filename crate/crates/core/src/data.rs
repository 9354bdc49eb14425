//! Dataset ingestion: rating files, binarization, the sparse binary
//! user-item matrix, train/test splits, and item popularity.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Supported on-disk rating formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`, 1-based ids.
    MovielensTsv,
    /// `user,item` per line, 0-based ids, already binary.
    PairCsv {
        #[serde(default)]
        header: bool,
    },
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataFormat::MovielensTsv => write!(f, "movielens-tsv"),
            DataFormat::PairCsv { .. } => write!(f, "pair-csv"),
        }
    }
}

/// One raw rating with dense internal ids.
#[derive(Debug, Clone, Copy)]
pub struct RatingRecord {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
}

/// Parsed dataset before binarization. External ids are remapped to dense
/// 0-based internal ids, sorted by external id for determinism.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub records: Vec<RatingRecord>,
    /// internal id -> external id
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    /// True when the source carries binary ratings (pair-csv).
    pub binary: bool,
}

/// Maps an explicit rating to implicit feedback: 1 iff rating > 4.
pub fn binarize(rating: f64) -> u8 {
    if rating > 4.0 {
        1
    } else {
        0
    }
}

pub fn load_interactions(path: impl AsRef<Path>, format: DataFormat) -> Result<RawDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);

    let mut triples: Vec<(u64, u64, f64)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 1 {
            if let DataFormat::PairCsv { header: true } = format {
                continue;
            }
        }
        let (user, item, rating) = parse_line(&line, format, lineno)?;
        triples.push((user, item, rating));
    }
    if triples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no interaction records",
            path.as_ref().display()
        )));
    }

    let mut user_map: BTreeMap<u64, u32> = BTreeMap::new();
    let mut item_map: BTreeMap<u64, u32> = BTreeMap::new();
    for &(u, i, _) in &triples {
        user_map.entry(u).or_insert(0);
        item_map.entry(i).or_insert(0);
    }
    for (next, v) in user_map.values_mut().enumerate() {
        *v = next as u32;
    }
    for (next, v) in item_map.values_mut().enumerate() {
        *v = next as u32;
    }

    let records = triples
        .iter()
        .map(|&(u, i, r)| RatingRecord {
            user: user_map[&u],
            item: item_map[&i],
            rating: r,
        })
        .collect();

    Ok(RawDataset {
        num_users: user_map.len(),
        num_items: item_map.len(),
        records,
        user_ids: user_map.keys().copied().collect(),
        item_ids: item_map.keys().copied().collect(),
        binary: matches!(format, DataFormat::PairCsv { .. }),
    })
}

fn parse_line(line: &str, format: DataFormat, lineno: usize) -> Result<(u64, u64, f64)> {
    let err = |msg: &str| Error::Parse {
        line: lineno,
        msg: format!("{msg}: {line:?}"),
    };
    match format {
        DataFormat::MovielensTsv => {
            let mut parts = line.split('\t');
            let user = parts
                .next()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| err("bad user id"))?;
            let item = parts
                .next()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| err("bad item id"))?;
            let rating = parts
                .next()
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|r| r.is_finite())
                .ok_or_else(|| err("bad rating"))?;
            // Timestamp column is present but unused.
            Ok((user, item, rating))
        }
        DataFormat::PairCsv { .. } => {
            let mut parts = line.split(',');
            let user = parts
                .next()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| err("bad user id"))?;
            let item = parts
                .next()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| err("bad item id"))?;
            Ok((user, item, 1.0))
        }
    }
}

/// Sparse binary user-item matrix. Histories are sorted item-id sequences;
/// membership checks are binary searches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    m: usize,
    n: usize,
    histories: Vec<Vec<u32>>,
}

impl InteractionMatrix {
    /// Builds a matrix from (user, item) pairs. Duplicates collapse.
    pub fn from_pairs(m: usize, n: usize, pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut histories = vec![Vec::new(); m];
        for (u, i) in pairs {
            if (u as usize) >= m || (i as usize) >= n {
                return Err(Error::IdRange(format!(
                    "pair ({u},{i}) outside {m}x{n} matrix"
                )));
            }
            histories[u as usize].push(i);
        }
        for h in &mut histories {
            h.sort_unstable();
            h.dedup();
        }
        Ok(InteractionMatrix { m, n, histories })
    }

    /// Binarizes raw ratings and drops users left without positives. User
    /// ids are re-densified over the kept users; the item space is kept
    /// whole. Returns the matrix and the kept users' external ids.
    pub fn from_binarized(raw: &RawDataset) -> (Self, Vec<u64>) {
        let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); raw.num_users];
        for r in &raw.records {
            let positive = if raw.binary {
                r.rating > 0.0
            } else {
                binarize(r.rating) == 1
            };
            if positive {
                per_user[r.user as usize].push(r.item);
            }
        }
        let mut histories = Vec::new();
        let mut kept_external = Vec::new();
        for (u, mut h) in per_user.into_iter().enumerate() {
            if h.is_empty() {
                continue;
            }
            h.sort_unstable();
            h.dedup();
            histories.push(h);
            kept_external.push(raw.user_ids[u]);
        }
        (
            InteractionMatrix {
                m: histories.len(),
                n: raw.num_items,
                histories,
            },
            kept_external,
        )
    }

    pub fn num_users(&self) -> usize {
        self.m
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn history(&self, u: u32) -> &[u32] {
        &self.histories[u as usize]
    }

    pub fn contains(&self, u: u32, i: u32) -> bool {
        self.histories[u as usize].binary_search(&i).is_ok()
    }

    pub fn num_interactions(&self) -> usize {
        self.histories.iter().map(|h| h.len()).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.histories
            .iter()
            .enumerate()
            .flat_map(|(u, h)| h.iter().map(move |&i| (u as u32, i)))
    }

    /// Appends extra users (given as item sets) after the existing ids.
    pub fn with_appended_users(&self, extra: &[Vec<u32>]) -> Result<Self> {
        let mut histories = self.histories.clone();
        for items in extra {
            let mut h = items.clone();
            for &i in &h {
                if (i as usize) >= self.n {
                    return Err(Error::IdRange(format!(
                        "appended item {i} outside item space {}",
                        self.n
                    )));
                }
            }
            h.sort_unstable();
            h.dedup();
            histories.push(h);
        }
        Ok(InteractionMatrix {
            m: histories.len(),
            n: self.n,
            histories,
        })
    }

    /// Writes `user<TAB>item` lines plus a JSON sidecar `{m, n, id_maps}`.
    pub fn save(&self, path: impl AsRef<Path>, user_ids: &[u64], item_ids: &[u64]) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (u, i) in self.pairs() {
            writeln!(out, "{u}\t{i}")?;
        }
        out.flush()?;
        let sidecar = MatrixSidecar {
            m: self.m,
            n: self.n,
            id_maps: IdMaps {
                users: user_ids.to_vec(),
                items: item_ids.to_vec(),
            },
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, IdMaps)> {
        let path = path.as_ref();
        let sidecar: MatrixSidecar =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let file = std::fs::File::open(path)?;
        let mut pairs = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let parse = |s: Option<&str>| s.and_then(|x| x.trim().parse::<u32>().ok());
            match (parse(parts.next()), parse(parts.next())) {
                (Some(u), Some(i)) => pairs.push((u, i)),
                _ => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        msg: format!("bad matrix line {line:?}"),
                    })
                }
            }
        }
        let matrix = InteractionMatrix::from_pairs(sidecar.m, sidecar.n, pairs)?;
        Ok((matrix, sidecar.id_maps))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixSidecar {
    m: usize,
    n: usize,
    id_maps: IdMaps,
}

/// Train/test partition of a matrix.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: InteractionMatrix,
    pub test: InteractionMatrix,
    pub observed_fraction: f64,
}

/// Per-user uniform split: each user keeps `round(fraction * |I_u|)`
/// interactions in train (clamped to [1, |I_u|-1] when the user has at
/// least two), the rest go to test. Users with a single interaction stay
/// entirely in train.
pub fn split(matrix: &InteractionMatrix, train_fraction: f64, rng: &mut Rng) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut train_pairs = Vec::new();
    let mut test_pairs = Vec::new();
    for u in 0..matrix.num_users() as u32 {
        let hist = matrix.history(u);
        if hist.len() < 2 {
            train_pairs.extend(hist.iter().map(|&i| (u, i)));
            continue;
        }
        let mut items: Vec<u32> = hist.to_vec();
        let mut user_rng = rng.derive(u as u64);
        user_rng.shuffle(&mut items);
        let len = items.len();
        let take = ((train_fraction * len as f64).round() as usize).clamp(1, len - 1);
        for (idx, &i) in items.iter().enumerate() {
            if idx < take {
                train_pairs.push((u, i));
            } else {
                test_pairs.push((u, i));
            }
        }
    }
    let m = matrix.num_users();
    let n = matrix.num_items();
    Ok(Split {
        train: InteractionMatrix::from_pairs(m, n, train_pairs)?,
        test: InteractionMatrix::from_pairs(m, n, test_pairs)?,
        observed_fraction: train_fraction,
    })
}

/// Per-item interaction counts and the popularity ranking (descending
/// count, ties broken by ascending item id).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopularityTable {
    pub counts: Vec<u64>,
    pub ranking: Vec<u32>,
}

pub fn popularity(matrix: &InteractionMatrix) -> PopularityTable {
    let mut counts = vec![0u64; matrix.num_items()];
    for (_, i) in matrix.pairs() {
        counts[i as usize] += 1;
    }
    let mut ranking: Vec<u32> = (0..matrix.num_items() as u32).collect();
    ranking.sort_by(|&a, &b| {
        counts[b as usize]
            .cmp(&counts[a as usize])
            .then(a.cmp(&b))
    });
    PopularityTable { counts, ranking }
}

impl PopularityTable {
    /// The most popular `ceil(fraction * n)` items.
    pub fn top_fraction(&self, fraction: f64) -> &[u32] {
        let take = ((fraction * self.ranking.len() as f64).ceil() as usize)
            .clamp(1, self.ranking.len().max(1));
        &self.ranking[..take.min(self.ranking.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("hcars-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn binarize_is_strict_above_four() {
        assert_eq!(binarize(5.0), 1);
        assert_eq!(binarize(4.0), 0);
        assert_eq!(binarize(4.5), 1);
        assert_eq!(binarize(4.0 + 1e-9), 1);
        assert_eq!(binarize(1.0), 0);
    }

    #[test]
    fn movielens_lines_parse() {
        let path = write_tmp("small.tsv", "1\t10\t5\t874965758\n2\t10\t3\t876893171\n1\t20\t4\t878542960\n");
        let raw = load_interactions(&path, DataFormat::MovielensTsv).unwrap();
        assert_eq!(raw.num_users, 2);
        assert_eq!(raw.num_items, 2);
        assert_eq!(raw.records.len(), 3);
        assert_eq!(raw.user_ids, vec![1, 2]);
        assert_eq!(raw.item_ids, vec![10, 20]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let path = write_tmp("bad.tsv", "a\tb\tc\n");
        match load_interactions(&path, DataFormat::MovielensTsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset_error() {
        let path = write_tmp("empty.tsv", "");
        assert!(matches!(
            load_interactions(&path, DataFormat::MovielensTsv),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn pair_csv_two_lines() {
        let path = write_tmp("pairs.csv", "0,5\n1,5\n");
        let raw = load_interactions(&path, DataFormat::PairCsv { header: false }).unwrap();
        assert_eq!(raw.num_users, 2);
        assert_eq!(raw.num_items, 1);
        let (matrix, kept) = InteractionMatrix::from_binarized(&raw);
        assert_eq!(matrix.num_users(), 2);
        assert_eq!(matrix.num_interactions(), 2);
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn binarize_drops_users_without_positives() {
        let path = write_tmp(
            "drop.tsv",
            "1\t1\t5\t0\n2\t1\t3\t0\n3\t2\t5\t0\n3\t1\t2\t0\n",
        );
        let raw = load_interactions(&path, DataFormat::MovielensTsv).unwrap();
        let (matrix, kept) = InteractionMatrix::from_binarized(&raw);
        // User "2" only rated below threshold: dropped, ids re-densified.
        assert_eq!(matrix.num_users(), 2);
        assert_eq!(kept, vec![1, 3]);
        assert_eq!(matrix.num_items(), 2);
        assert_eq!(matrix.history(0), &[0]);
        assert_eq!(matrix.history(1), &[1]);
    }

    #[test]
    fn split_80_20_on_ten_interactions() {
        let matrix =
            InteractionMatrix::from_pairs(1, 10, (0..10).map(|i| (0u32, i as u32))).unwrap();
        let mut rng = Rng::new(5);
        let s = split(&matrix, 0.8, &mut rng).unwrap();
        assert_eq!(s.train.history(0).len(), 8);
        assert_eq!(s.test.history(0).len(), 2);
    }

    #[test]
    fn split_is_partition_and_deterministic() {
        let mut rng = Rng::new(77);
        let mut pairs = Vec::new();
        for u in 0..30u32 {
            let len = 1 + rng.below(20);
            let items = rng.sample_distinct(50, len);
            pairs.extend(items.into_iter().map(|i| (u, i as u32)));
        }
        let matrix = InteractionMatrix::from_pairs(30, 50, pairs).unwrap();
        let s1 = split(&matrix, 0.3, &mut Rng::new(9)).unwrap();
        let s2 = split(&matrix, 0.3, &mut Rng::new(9)).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.test, s2.test);

        for u in 0..30u32 {
            let hist = matrix.history(u);
            let train = s1.train.history(u);
            let test = s1.test.history(u);
            // Partition per user.
            let mut merged: Vec<u32> = train.iter().chain(test).copied().collect();
            merged.sort_unstable();
            assert_eq!(merged, hist);
            for i in train {
                assert!(!test.contains(i));
            }
            // Per-user count within ±1 of the fraction.
            if hist.len() >= 2 {
                let expect = 0.3 * hist.len() as f64;
                assert!((train.len() as f64 - expect).abs() <= 1.0 + 1e-9);
                assert!(!test.is_empty() || hist.len() < 2);
            } else {
                assert_eq!(train.len(), hist.len());
            }
        }
    }

    #[test]
    fn popularity_ranking_ties_by_id() {
        // counts: A(0)=3, B(1)=1, C(2)=3
        let pairs = vec![
            (0u32, 0u32),
            (1, 0),
            (2, 0),
            (0, 1),
            (0, 2),
            (1, 2),
            (2, 2),
        ];
        let matrix = InteractionMatrix::from_pairs(3, 3, pairs).unwrap();
        let pop = popularity(&matrix);
        assert_eq!(pop.counts, vec![3, 1, 3]);
        assert_eq!(pop.ranking, vec![0, 2, 1]);
    }

    #[test]
    fn popularity_of_empty_matrix_is_identity() {
        let matrix = InteractionMatrix::from_pairs(2, 4, Vec::new()).unwrap();
        let pop = popularity(&matrix);
        assert_eq!(pop.counts, vec![0; 4]);
        assert_eq!(pop.ranking, vec![0, 1, 2, 3]);
    }

    #[test]
    fn matrix_roundtrips_through_disk() {
        let matrix = InteractionMatrix::from_pairs(
            3,
            5,
            vec![(0u32, 1u32), (0, 4), (1, 0), (2, 2), (2, 3)],
        )
        .unwrap();
        let dir = std::env::temp_dir().join("hcars-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.tsv");
        matrix.save(&path, &[10, 20, 30], &[0, 1, 2, 3, 4]).unwrap();
        let (loaded, ids) = InteractionMatrix::load(&path).unwrap();
        assert_eq!(loaded, matrix);
        assert_eq!(ids.users, vec![10, 20, 30]);
    }
}
