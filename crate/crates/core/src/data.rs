//! Interaction and feature ingestion.
//!
//! Interactions come from a tab-separated file `user<TAB>item<TAB>label`
//! where the label marks the split (0 train, 1 valid, 2 test). Raw IDs are
//! remapped to contiguous indices in first-appearance order. Item features
//! are stored in a small little-endian binary container (`BRFM`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"BRFM";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn from_label(label: u8) -> Option<Split> {
        match label {
            0 => Some(Split::Train),
            1 => Some(Split::Valid),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }

    fn slot(self) -> usize {
        self.label() as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub split: Split,
}

/// Content modality carried by a feature matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Text,
}

/// Bidirectional mapping between raw string IDs and contiguous indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    /// Identity mapping where index `k` exports as the decimal string `k`.
    pub fn identity(n: usize) -> Self {
        let mut map = IdMap::default();
        for k in 0..n {
            map.intern(&k.to_string());
        }
        map
    }

    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&idx) = self.index.get(raw) {
            return idx;
        }
        let idx = self.raw.len();
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), idx);
        idx
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, idx: usize) -> Option<&str> {
        self.raw.get(idx).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Dense row-major `f32` item feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "feature payload has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature value in row {}",
                pos / cols.max(1)
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Loaded interactions with train-side indexes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    pub interactions: Vec<Interaction>,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
    /// Per-user sorted, deduplicated train items.
    pub train_history: Vec<Vec<usize>>,
    /// Per-item sorted, deduplicated train users.
    pub train_item_users: Vec<Vec<usize>>,
    pub features: BTreeMap<Modality, FeatureMatrix>,
    pub duplicates_dropped: usize,
}

impl Dataset {
    /// Builds a dataset from already-indexed interactions. Duplicate
    /// `(user, item, split)` triples are dropped.
    pub fn from_interactions(
        num_users: usize,
        num_items: usize,
        interactions: Vec<Interaction>,
    ) -> Result<Self> {
        Self::assemble(
            num_users,
            num_items,
            interactions,
            IdMap::identity(num_users),
            IdMap::identity(num_items),
        )
    }

    fn assemble(
        num_users: usize,
        num_items: usize,
        interactions: Vec<Interaction>,
        user_ids: IdMap,
        item_ids: IdMap,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(interactions.len());
        let mut kept = Vec::with_capacity(interactions.len());
        let mut duplicates = 0;
        for it in interactions {
            if it.user >= num_users || it.item >= num_items {
                return Err(Error::Data(format!(
                    "interaction ({}, {}) out of range {num_users}x{num_items}",
                    it.user, it.item
                )));
            }
            if seen.insert((it.user, it.item, it.split)) {
                kept.push(it);
            } else {
                duplicates += 1;
            }
        }
        if duplicates > 0 {
            warn!("dropped {duplicates} duplicate (user, item, split) rows");
        }

        let mut train_history = vec![Vec::new(); num_users];
        let mut train_item_users = vec![Vec::new(); num_items];
        for it in kept.iter().filter(|it| it.split == Split::Train) {
            train_history[it.user].push(it.item);
            train_item_users[it.item].push(it.user);
        }
        for list in train_history.iter_mut().chain(train_item_users.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }

        Ok(Dataset {
            num_users,
            num_items,
            interactions: kept,
            user_ids,
            item_ids,
            train_history,
            train_item_users,
            features: BTreeMap::new(),
            duplicates_dropped: duplicates,
        })
    }

    pub fn with_features(mut self, modality: Modality, features: FeatureMatrix) -> Result<Self> {
        if features.rows != self.num_items {
            return Err(Error::Dimension(format!(
                "{modality:?} features have {} rows, dataset has {} items",
                features.rows, self.num_items
            )));
        }
        self.features.insert(modality, features);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Train interactions in file order.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.interactions
            .iter()
            .filter(|it| it.split == Split::Train)
            .map(|it| (it.user, it.item))
            .collect()
    }

    /// Per-user sorted item lists for one split.
    pub fn split_items(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for it in self.interactions.iter().filter(|it| it.split == split) {
            out[it.user].push(it.item);
        }
        for list in &mut out {
            list.sort_unstable();
            list.dedup();
        }
        out
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for it in &self.interactions {
            counts[it.split.slot()] += 1;
        }
        counts
    }

    pub fn is_train_item(&self, user: usize, item: usize) -> bool {
        self.train_history[user].binary_search(&item).is_ok()
    }

    /// Train interaction count per item.
    pub fn item_popularity(&self) -> Vec<usize> {
        self.train_item_users.iter().map(Vec::len).collect()
    }
}

/// Reads the split-marked interaction file.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_interactions(reader: impl BufRead) -> Result<Dataset> {
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut interactions = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<interactions>", e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if idx == 0 && is_header(&fields) {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let label: u8 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("split label `{}` is not an integer", fields[2]),
        })?;
        let split = Split::from_label(label).ok_or_else(|| {
            Error::Format(format!(
                "line {line_no}: split label {label} outside {{0,1,2}}"
            ))
        })?;
        let (u_raw, i_raw) = (fields[0].trim(), fields[1].trim());
        if u_raw.is_empty() || i_raw.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty user or item id".into(),
            });
        }
        let user = users.intern(u_raw);
        let item = items.intern(i_raw);
        interactions.push(Interaction { user, item, split });
    }

    Dataset::assemble(users.len(), items.len(), interactions, users, items)
}

// A first line counts as a header when it starts with a non-digit and its
// label column is not a split label.
fn is_header(fields: &[&str]) -> bool {
    let starts_non_digit = fields
        .first()
        .and_then(|f| f.chars().next())
        .is_some_and(|c| !c.is_ascii_digit());
    let label_ok = fields
        .get(2)
        .and_then(|f| f.trim().parse::<u8>().ok())
        .is_some();
    starts_non_digit && !label_ok
}

pub fn write_interactions(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "userID\titemID\tx_label").map_err(io_err)?;
    for it in &ds.interactions {
        writeln!(
            w,
            "{}\t{}\t{}",
            ds.user_ids.raw(it.user).unwrap_or_default(),
            ds.item_ids.raw(it.item).unwrap_or_default(),
            it.split.label()
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// How feature-file rows map to items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureRowOrder {
    /// Row `r` belongs to the item whose raw id is the integer `r`.
    #[default]
    RawId,
    /// Row `r` belongs to internal item index `r` (first-appearance order).
    Internal,
}

impl FeatureRowOrder {
    pub fn name(self) -> &'static str {
        match self {
            FeatureRowOrder::RawId => "raw_id",
            FeatureRowOrder::Internal => "internal",
        }
    }
}

impl std::str::FromStr for FeatureRowOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_id" => Ok(FeatureRowOrder::RawId),
            "internal" => Ok(FeatureRowOrder::Internal),
            other => Err(Error::Config(format!("unknown feature row order `{other}`"))),
        }
    }
}

/// Reorders a loaded feature matrix into internal item order.
pub fn align_features(fm: FeatureMatrix, items: &IdMap, order: FeatureRowOrder) -> Result<FeatureMatrix> {
    if fm.rows != items.len() {
        return Err(Error::Dimension(format!(
            "feature file has {} rows, dataset has {} items",
            fm.rows,
            items.len()
        )));
    }
    if order == FeatureRowOrder::Internal {
        return Ok(fm);
    }
    let mut data = Vec::with_capacity(fm.data.len());
    for idx in 0..items.len() {
        let raw = items.raw(idx).unwrap_or_default();
        let row: usize = raw
            .parse()
            .ok()
            .filter(|&r| r < fm.rows)
            .ok_or_else(|| Error::Data(format!("item id `{raw}` is not a feature row index below {}", fm.rows)))?;
        data.extend_from_slice(fm.row(row));
    }
    FeatureMatrix::new(fm.rows, fm.cols, data)
}

/// Reads a `BRFM` feature file and checks it against the item count.
pub fn load_features(path: impl AsRef<Path>, expected_rows: usize) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, expected_rows)
}

pub fn decode_features(bytes: &[u8], expected_rows: usize) -> Result<FeatureMatrix> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Format("feature file shorter than header".into()));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Format("feature file magic is not BRFM".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported BRFM version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if rows != expected_rows {
        return Err(Error::Dimension(format!(
            "feature file has {rows} rows, expected {expected_rows}"
        )));
    }
    let payload = &bytes[FEATURE_HEADER_LEN..];
    let expected_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("feature shape overflows".into()))?;
    if payload.len() != expected_len {
        return Err(Error::Format(format!(
            "feature payload is {} bytes, header implies {expected_len}",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(rows, cols, data)
}

pub fn encode_features(fm: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + fm.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(fm.rows as u64).to_le_bytes());
    out.extend_from_slice(&(fm.cols as u64).to_le_bytes());
    for v in &fm.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_features(fm: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(fm)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// A user with valid/test interactions but no train interaction.
    ColdStartUser { user: usize },
    /// The same (user, item) pair appears in more than one split.
    CrossSplitPair {
        user: usize,
        item: usize,
        splits: Vec<Split>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitReport {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub violations: Vec<Violation>,
}

impl SplitReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "train={}\nvalid={}\ntest={}\nviolations={}\n",
            self.train,
            self.valid,
            self.test,
            self.violations.len()
        );
        for v in &self.violations {
            match v {
                Violation::ColdStartUser { user } => {
                    s.push_str(&format!("cold_start_user\t{user}\n"));
                }
                Violation::CrossSplitPair {
                    user,
                    item,
                    splits,
                } => {
                    let names: Vec<String> = splits.iter().map(Split::to_string).collect();
                    s.push_str(&format!(
                        "cross_split_pair\t{user}\t{item}\t{}\n",
                        names.join(",")
                    ));
                }
            }
        }
        s
    }
}

pub fn validate_split_integrity(ds: &Dataset) -> SplitReport {
    let [train, valid, test] = ds.split_counts();
    let mut violations = Vec::new();

    let mut needs_train = vec![false; ds.num_users];
    for it in ds.interactions.iter().filter(|it| it.split != Split::Train) {
        needs_train[it.user] = true;
    }
    for (user, &needed) in needs_train.iter().enumerate() {
        if needed && ds.train_history[user].is_empty() {
            violations.push(Violation::ColdStartUser { user });
        }
    }

    let mut pair_splits: BTreeMap<(usize, usize), Vec<Split>> = BTreeMap::new();
    for it in &ds.interactions {
        pair_splits.entry((it.user, it.item)).or_default().push(it.split);
    }
    for ((user, item), mut splits) in pair_splits {
        splits.sort_unstable();
        splits.dedup();
        if splits.len() > 1 {
            violations.push(Violation::CrossSplitPair {
                user,
                item,
                splits,
            });
        }
    }

    SplitReport {
        train,
        valid,
        test,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_interactions(text.as_bytes())
    }

    #[test]
    fn remaps_in_first_appearance_order() {
        let ds = parse("A\tX\t0\nA\tY\t0\nB\tY\t2\n").unwrap();
        assert_eq!(ds.num_users, 2);
        assert_eq!(ds.num_items, 2);
        assert_eq!(ds.split_counts(), [2, 0, 1]);
        assert_eq!(ds.user_ids.raw(0), Some("A"));
        assert_eq!(ds.item_ids.get("Y"), Some(1));
        assert_eq!(ds.train_history[0], vec![0, 1]);
        assert_eq!(ds.train_item_users[1], vec![0]);
    }

    #[test]
    fn skips_header_line() {
        let ds = parse("userID\titemID\tx_label\n1\t2\t0\n").unwrap();
        assert_eq!(ds.interactions.len(), 1);
    }

    #[test]
    fn malformed_row_reports_line() {
        match parse("1\t2\t0\n1\t3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_is_format_error() {
        assert!(matches!(parse("1\t2\t3\n"), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_triples_are_dropped() {
        let ds = parse("1\t2\t0\n1\t2\t0\n1\t3\t1\n").unwrap();
        assert_eq!(ds.interactions.len(), 2);
        assert_eq!(ds.duplicates_dropped, 1);
    }

    #[test]
    fn feature_payload_roundtrip_and_shape_checks() {
        let fm = FeatureMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let bytes = encode_features(&fm);
        let back = decode_features(&bytes, 3).unwrap();
        assert_eq!(back, fm);
        assert_eq!(back.row(2), &[1.0, 1.0]);

        let two = FeatureMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            decode_features(&encode_features(&two), 3),
            Err(Error::Dimension(_))
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad, 3), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_feature_names_row() {
        let mut fm = FeatureMatrix::zeros(3, 2);
        fm.data[5] = f32::NAN;
        let bytes = encode_features(&fm);
        match decode_features(&bytes, 3) {
            Err(Error::Data(msg)) => assert!(msg.contains("row 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn integrity_flags_cold_start_and_cross_split() {
        let clean = parse("a\tx\t0\na\ty\t1\nb\ty\t0\nb\tx\t2\n").unwrap();
        assert!(validate_split_integrity(&clean).is_clean());

        let cold = parse("a\tx\t0\nc\ty\t2\n").unwrap();
        let report = validate_split_integrity(&cold);
        assert_eq!(report.violations, vec![Violation::ColdStartUser { user: 1 }]);

        let cross = parse("a\tx\t0\na\tx\t2\na\ty\t0\n").unwrap();
        let report = validate_split_integrity(&cross);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            report.violations[0],
            Violation::CrossSplitPair { user: 0, item: 0, .. }
        ));
        assert_eq!(report.train + report.valid + report.test, 3);
    }

    proptest! {
        #[test]
        fn remap_is_bijective(rows in proptest::collection::vec((0u16..30, 0u16..30, 0u8..3), 1..60)) {
            let text: String = rows
                .iter()
                .map(|(u, i, s)| format!("u{u}\tit{i}\t{s}\n"))
                .collect();
            let ds = parse(&text).unwrap();
            for (u, i, _) in &rows {
                let raw_u = format!("u{u}");
                let idx = ds.user_ids.get(&raw_u).unwrap();
                prop_assert_eq!(ds.user_ids.raw(idx), Some(raw_u.as_str()));
                let raw_i = format!("it{i}");
                let idx = ds.item_ids.get(&raw_i).unwrap();
                prop_assert_eq!(ds.item_ids.raw(idx), Some(raw_i.as_str()));
            }
            let [a, b, c] = ds.split_counts();
            prop_assert_eq!(a + b + c, ds.interactions.len());
        }

        #[test]
        fn feature_file_bytes_roundtrip(rows in 1usize..6, cols in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|k| ((seed.wrapping_mul(k as u64 + 1) % 1000) as f32) * 0.37 - 100.0)
                .collect();
            let fm = FeatureMatrix::new(rows, cols, data).unwrap();
            let bytes = encode_features(&fm);
            let back = decode_features(&bytes, rows).unwrap();
            prop_assert_eq!(encode_features(&back), bytes);
        }
    }

    #[test]
    fn align_features_by_raw_id() {
        let ds = parse_interactions("u\ti\tx_label\n0\t2\t0\n0\t0\t0\n1\t1\t0\n".as_bytes()).unwrap();
        let fm = FeatureMatrix::new(3, 1, vec![10.0, 11.0, 12.0]).unwrap();
        let aligned = align_features(fm.clone(), &ds.item_ids, FeatureRowOrder::RawId).unwrap();
        assert_eq!(aligned.data, vec![12.0, 10.0, 11.0]);
        assert_eq!(align_features(fm.clone(), &ds.item_ids, FeatureRowOrder::Internal).unwrap(), fm);
        let short = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(align_features(short, &ds.item_ids, FeatureRowOrder::RawId).is_err());
    }
}
