//! Interaction log ingestion: parsing, fixed-point filtering, role splits,
//! popularity segmentation, and pairwise-ranking batch sampling.

use crate::config::SplitMode;
use crate::error::{Error, Result};
use crate::io::{expect_magic, read_u16, read_u32, read_u64, write_u16, write_u32, write_u64};
use crate::rng;
use crate::types::{GroupingPlan, InteractionLog, Role};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// One pairwise ranking sample: the user interacted with `positive` in train
/// and never with `negative`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriple {
    pub user: u32,
    pub positive: u32,
    pub negative: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchRole {
    Train,
    Validation,
}

struct RawRecord {
    user: String,
    item: String,
    ts: Option<i64>,
}

fn parse_line(lineno: usize, line: &str) -> Result<Option<RawRecord>> {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let mut parts = trimmed.split('\t');
    let user = parts.next().unwrap_or("").trim();
    let item = parts.next().unwrap_or("").trim();
    if user.is_empty() || item.is_empty() {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected `user<TAB>item[<TAB>timestamp]`, got `{trimmed}`"),
        });
    }
    let ts = match parts.next() {
        Some(t) => Some(t.trim().parse::<i64>().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad timestamp `{t}`: {e}"),
        })?),
        None => None,
    };
    if parts.next().is_some() {
        return Err(Error::Parse {
            line: lineno,
            msg: "too many fields".into(),
        });
    }
    Ok(Some(RawRecord {
        user: user.to_string(),
        item: item.to_string(),
        ts,
    }))
}

/// Numeric-aware ordering of original ids so densification does not depend on
/// input line order.
fn cmp_orig(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Parse a log file, drop duplicate (user, item) pairs, then iteratively
/// remove users and items with fewer than `min_interactions` interactions
/// until a fixed point. Ids are densified in sorted original-id order; roles
/// are left unassigned.
pub fn load_and_filter(path: &Path, min_interactions: u32) -> Result<InteractionLog> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    load_and_filter_from(&mut reader, min_interactions)
}

pub fn load_and_filter_from<R: BufRead>(
    reader: &mut R,
    min_interactions: u32,
) -> Result<InteractionLog> {
    // Dedup per (user, item); keep the earliest timestamp seen.
    let mut pairs: BTreeMap<(String, String), Option<i64>> = BTreeMap::new();
    let mut lineno = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        lineno += 1;
        if let Some(rec) = parse_line(lineno, &line)? {
            pairs
                .entry((rec.user, rec.item))
                .and_modify(|old| {
                    *old = match (*old, rec.ts) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (None, b) => b,
                        (a, None) => a,
                    }
                })
                .or_insert(rec.ts);
        }
    }
    build_filtered(pairs, min_interactions)
}

fn build_filtered(
    pairs: BTreeMap<(String, String), Option<i64>>,
    min_interactions: u32,
) -> Result<InteractionLog> {
    let mut records: Vec<(String, String, Option<i64>)> =
        pairs.into_iter().map(|((u, i), ts)| (u, i, ts)).collect();

    // Fixed point: drop under-threshold users and items until stable.
    loop {
        let mut ucount: BTreeMap<String, u32> = BTreeMap::new();
        let mut icount: BTreeMap<String, u32> = BTreeMap::new();
        for (u, i, _) in &records {
            *ucount.entry(u.clone()).or_default() += 1;
            *icount.entry(i.clone()).or_default() += 1;
        }
        let before = records.len();
        records.retain(|(u, i, _)| {
            ucount[u] >= min_interactions && icount[i] >= min_interactions
        });
        if records.len() == before {
            break;
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut users: Vec<String> = records.iter().map(|(u, _, _)| u.clone()).collect();
    let mut items: Vec<String> = records.iter().map(|(_, i, _)| i.clone()).collect();
    users.sort_by(|a, b| cmp_orig(a, b));
    users.dedup();
    items.sort_by(|a, b| cmp_orig(a, b));
    items.dedup();
    let uindex: BTreeMap<&str, u32> = users
        .iter()
        .enumerate()
        .map(|(k, v)| (v.as_str(), k as u32))
        .collect();
    let iindex: BTreeMap<&str, u32> = items
        .iter()
        .enumerate()
        .map(|(k, v)| (v.as_str(), k as u32))
        .collect();

    let mut triples: Vec<(u32, u32, Role)> = Vec::with_capacity(records.len());
    let mut timestamps: Vec<Option<i64>> = Vec::with_capacity(records.len());
    for (u, i, ts) in &records {
        triples.push((uindex[u.as_str()], iindex[i.as_str()], Role::Unassigned));
        timestamps.push(*ts);
    }
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.sort_by_key(|&k| (triples[k].0, triples[k].1));
    let triples: Vec<_> = order.iter().map(|&k| triples[k]).collect();
    let timestamps: Vec<_> = order.iter().map(|&k| timestamps[k]).collect();
    let all_stamped = timestamps.iter().all(|t| t.is_some());

    let mut log = InteractionLog {
        num_users: users.len(),
        num_items: items.len(),
        user_orig: users,
        item_orig: items,
        triples,
        timestamps: if all_stamped { Some(timestamps) } else { None },
        user_adjacency: Vec::new(),
        item_adjacency: Vec::new(),
    };
    log.rebuild_adjacency();
    Ok(log)
}

/// Cut points for splitting `m` interactions by cumulative ratios: the first
/// `floor(r1*m)` go to train, up to `floor((r1+r2)*m)` to validation, the rest
/// to test. A user always keeps at least one train interaction.
fn split_boundaries(m: usize, ratios: [f64; 3]) -> (usize, usize) {
    // The epsilon keeps exact multiples (0.7 + 0.1 = 0.799.., times 10) from
    // flooring one short.
    let b1 = ((ratios[0] * m as f64 + 1e-9).floor() as usize).min(m);
    let b2 = (((ratios[0] + ratios[1]) * m as f64 + 1e-9).floor() as usize).clamp(b1, m);
    if b1 == 0 {
        (1, b2.max(1))
    } else {
        (b1, b2)
    }
}

/// Assign roles. Per-user mode shuffles each user's interactions with a
/// user-derived seed (or orders them chronologically when every record has a
/// timestamp); global mode shuffles the whole multiset once. Either way every
/// user keeps at least one train interaction, and any item that would appear
/// only in validation/test has its lowest-user occurrence promoted to train.
pub fn split_roles(
    mut log: InteractionLog,
    ratios: [f64; 3],
    mode: SplitMode,
    seed: u64,
) -> Result<InteractionLog> {
    let s: f64 = ratios.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("ratios must sum to 1, got {s}")));
    }

    // Indices into log.triples per user.
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); log.num_users];
    for (k, &(u, _, _)) in log.triples.iter().enumerate() {
        per_user[u as usize].push(k);
    }

    match mode {
        SplitMode::PerUser => {
            for (u, idxs) in per_user.iter_mut().enumerate() {
                if let Some(ts) = &log.timestamps {
                    idxs.sort_by_key(|&k| (ts[k], log.triples[k].1));
                } else {
                    let mut r = rng::chacha(rng::derive(seed, "split", u as u64));
                    idxs.shuffle(&mut r);
                }
                let (b1, b2) = split_boundaries(idxs.len(), ratios);
                for (pos, &k) in idxs.iter().enumerate() {
                    log.triples[k].2 = if pos < b1 {
                        Role::Train
                    } else if pos < b2 {
                        Role::Validation
                    } else {
                        Role::Test
                    };
                }
            }
        }
        SplitMode::Global => {
            let mut order: Vec<usize> = (0..log.triples.len()).collect();
            let mut r = rng::chacha(rng::derive(seed, "split-global", 0));
            order.shuffle(&mut r);
            let (b1, b2) = split_boundaries(order.len(), ratios);
            for (pos, &k) in order.iter().enumerate() {
                log.triples[k].2 = if pos < b1 {
                    Role::Train
                } else if pos < b2 {
                    Role::Validation
                } else {
                    Role::Test
                };
            }
            // Global split can leave a user with no train interaction.
            for idxs in &per_user {
                if !idxs.iter().any(|&k| log.triples[k].2 == Role::Train) {
                    if let Some(&k) = idxs.first() {
                        log.triples[k].2 = Role::Train;
                    }
                }
            }
        }
    }

    // Items seen only in validation/test would be untrainable: promote the
    // occurrence with the lowest user id.
    let mut item_train = vec![false; log.num_items];
    let mut item_first: Vec<Option<usize>> = vec![None; log.num_items];
    for (k, &(_, i, role)) in log.triples.iter().enumerate() {
        if role == Role::Train {
            item_train[i as usize] = true;
        } else if item_first[i as usize].is_none() {
            // Triples are sorted by (user, item), so the first hit has the
            // lowest user id.
            item_first[i as usize] = Some(k);
        }
    }
    for i in 0..log.num_items {
        if !item_train[i] {
            if let Some(k) = item_first[i] {
                log.triples[k].2 = Role::Train;
            }
        }
    }

    log.rebuild_adjacency();
    Ok(log)
}

/// Sort items by train popularity descending (ties by ascending item id) and
/// cut the order into `num_groups` contiguous groups; when sizes cannot be
/// equal the earliest groups take one extra item each.
pub fn segment_items_by_popularity(
    log: &InteractionLog,
    num_groups: usize,
) -> Result<GroupingPlan> {
    let mut popularity = vec![0u32; log.num_items];
    for (_, i) in log.triples_with_role(Role::Train) {
        popularity[i as usize] += 1;
    }
    let mut order: Vec<u32> = (0..log.num_items as u32).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(popularity[i as usize]), i));
    segment_order(order, popularity, num_groups, log.num_items)
}

/// Equal segmentation of an arbitrary item order; used for the random
/// segmentation ablation.
pub fn segment_items_randomly(
    log: &InteractionLog,
    num_groups: usize,
    seed: u64,
) -> Result<GroupingPlan> {
    let mut popularity = vec![0u32; log.num_items];
    for (_, i) in log.triples_with_role(Role::Train) {
        popularity[i as usize] += 1;
    }
    let mut order: Vec<u32> = (0..log.num_items as u32).collect();
    let mut r = rng::chacha(rng::derive(seed, "segment-random", 0));
    order.shuffle(&mut r);
    segment_order(order, popularity, num_groups, log.num_items)
}

fn segment_order(
    order: Vec<u32>,
    popularity: Vec<u32>,
    num_groups: usize,
    num_items: usize,
) -> Result<GroupingPlan> {
    if num_groups == 0 || num_groups > num_items {
        return Err(Error::Config(format!(
            "item group count {num_groups} must be in 1..={num_items}"
        )));
    }
    let base = num_items / num_groups;
    let extra = num_items % num_groups;
    let mut item_groups = Vec::with_capacity(num_groups);
    let mut cursor = 0usize;
    for g in 0..num_groups {
        let size = base + usize::from(g < extra);
        item_groups.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(GroupingPlan {
        item_groups,
        popularity,
        user_groups: Vec::new(),
    })
}

/// Uniformly sample `(user, positive)` pairs from the given train triples and
/// reject-sample a negative outside the user's train adjacency.
pub fn sample_bpr_from<R: Rng>(
    train: &[(u32, u32)],
    user_adjacency: &[Vec<u32>],
    num_items: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<BprTriple> {
    let mut out = Vec::with_capacity(batch_size);
    if train.is_empty() {
        return out;
    }
    let mut warned = false;
    while out.len() < batch_size {
        let (user, positive) = train[rng.gen_range(0..train.len())];
        let adj = &user_adjacency[user as usize];
        if adj.len() >= num_items {
            if !warned {
                log::warn!("user {user} interacts with every item; skipping as BPR anchor");
                warned = true;
            }
            continue;
        }
        let negative = loop {
            let cand = rng.gen_range(0..num_items as u32);
            if adj.binary_search(&cand).is_err() {
                break cand;
            }
        };
        out.push(BprTriple {
            user,
            positive,
            negative,
        });
    }
    out
}

/// Batch sampler over the whole train split.
pub fn sample_bpr_batch(log: &InteractionLog, batch_size: usize, seed: u64) -> Vec<BprTriple> {
    let train: Vec<(u32, u32)> = log.triples_with_role(Role::Train).collect();
    let mut r = rng::chacha(seed);
    sample_bpr_from(&train, &log.user_adjacency, log.num_items, batch_size, &mut r)
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"PEDS";
const SNAPSHOT_VERSION: u16 = 1;

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R, path: &str) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Corrupt {
        path: path.to_string(),
        msg: format!("invalid utf-8 in id: {e}"),
    })
}

pub fn write_snapshot(log: &InteractionLog, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(SNAPSHOT_MAGIC)?;
    write_u16(&mut w, SNAPSHOT_VERSION)?;
    write_u32(&mut w, log.num_users as u32)?;
    write_u32(&mut w, log.num_items as u32)?;
    write_u64(&mut w, log.triples.len() as u64)?;
    w.write_all(&[u8::from(log.timestamps.is_some())])?;
    for s in &log.user_orig {
        write_string(&mut w, s)?;
    }
    for s in &log.item_orig {
        write_string(&mut w, s)?;
    }
    for (k, &(u, i, role)) in log.triples.iter().enumerate() {
        write_u32(&mut w, u)?;
        write_u32(&mut w, i)?;
        w.write_all(&[role.code()])?;
        if let Some(ts) = &log.timestamps {
            write_u64(&mut w, ts[k].unwrap_or(0) as u64)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<InteractionLog> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, SNAPSHOT_MAGIC, &pstr)?;
    let version = read_u16(&mut r)?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Corrupt {
            path: pstr,
            msg: format!("unsupported snapshot version {version}"),
        });
    }
    let num_users = read_u32(&mut r)? as usize;
    let num_items = read_u32(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let mut has_ts = [0u8; 1];
    r.read_exact(&mut has_ts)?;
    let mut user_orig = Vec::with_capacity(num_users);
    for _ in 0..num_users {
        user_orig.push(read_string(&mut r, &pstr)?);
    }
    let mut item_orig = Vec::with_capacity(num_items);
    for _ in 0..num_items {
        item_orig.push(read_string(&mut r, &pstr)?);
    }
    let mut triples = Vec::with_capacity(count);
    let mut timestamps = Vec::with_capacity(count);
    for _ in 0..count {
        let u = read_u32(&mut r)?;
        let i = read_u32(&mut r)?;
        let mut role = [0u8; 1];
        r.read_exact(&mut role)?;
        triples.push((u, i, Role::from_code(role[0])?));
        if has_ts[0] == 1 {
            timestamps.push(Some(read_u64(&mut r)? as i64));
        }
    }
    let mut log = InteractionLog {
        num_users,
        num_items,
        user_orig,
        item_orig,
        triples,
        timestamps: if has_ts[0] == 1 { Some(timestamps) } else { None },
        user_adjacency: Vec::new(),
        item_adjacency: Vec::new(),
    };
    log.rebuild_adjacency();
    Ok(log)
}

/// Human-readable counts written next to the binary snapshot.
pub fn stats_summary(log: &InteractionLog) -> String {
    let train = log.triples.iter().filter(|t| t.2 == Role::Train).count();
    let val = log
        .triples
        .iter()
        .filter(|t| t.2 == Role::Validation)
        .count();
    let test = log.triples.iter().filter(|t| t.2 == Role::Test).count();
    let density = log.triples.len() as f64 / (log.num_users as f64 * log.num_items as f64);
    format!(
        "users = {}\nitems = {}\ninteractions = {}\ntrain = {}\nvalidation = {}\ntest = {}\ndensity = {:.6}\n",
        log.num_users,
        log.num_items,
        log.triples.len(),
        train,
        val,
        test,
        density
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn load_str(text: &str, min: u32) -> Result<InteractionLog> {
        load_and_filter_from(&mut Cursor::new(text.as_bytes()), min)
    }

    fn synthetic_lines(users: usize, items_per_user: usize) -> String {
        let mut s = String::new();
        for u in 0..users {
            for i in 0..items_per_user {
                s.push_str(&format!("{u}\t{i}\n"));
            }
        }
        s
    }

    #[test]
    fn retains_users_above_threshold() {
        // Threshold applies to both sides: 3 users x 12 items keeps everyone
        // once items also clear the bar.
        let log = load_str(&synthetic_lines(3, 12), 3).unwrap();
        assert_eq!(log.num_users, 3);
        assert_eq!(log.num_items, 12);
        assert_eq!(log.triples.len(), 36);
        let log = load_str(&synthetic_lines(12, 12), 10).unwrap();
        assert_eq!(log.num_users, 12);
        assert_eq!(log.num_items, 12);
    }

    #[test]
    fn filtering_reaches_fixed_point() {
        // 11 core users over 11 core items, plus one weak user with 9 items
        // and one weak item seen only by the weak user.
        let mut text = synthetic_lines(11, 11);
        for i in 0..9 {
            text.push_str(&format!("weak\t{}\n", 100 + i));
        }
        let log = load_str(&text, 10).unwrap();
        assert_eq!(log.num_users, 11);
        assert_eq!(log.num_items, 11);
        for adj in &log.user_adjacency {
            assert!(adj.len() >= 10);
        }
        for adj in &log.item_adjacency {
            assert!(adj.len() >= 10);
        }
    }

    #[test]
    fn duplicates_collapse() {
        let mut text = synthetic_lines(2, 3);
        text.push_str("0\t0\n0\t0\n");
        let log = load_str(&text, 1).unwrap();
        assert_eq!(log.triples.len(), 6);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load_str("0\t1\nnot a record\n", 1).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_after_filter_is_an_error() {
        assert!(matches!(
            load_str("0\t0\n", 5).unwrap_err(),
            Error::EmptyDataset
        ));
    }

    fn per_user_role_counts(log: &InteractionLog) -> Vec<(usize, usize, usize)> {
        let mut out = vec![(0usize, 0usize, 0usize); log.num_users];
        for &(u, _, role) in &log.triples {
            match role {
                Role::Train => out[u as usize].0 += 1,
                Role::Validation => out[u as usize].1 += 1,
                Role::Test => out[u as usize].2 += 1,
                Role::Unassigned => {}
            }
        }
        out
    }

    #[test]
    fn split_ten_interactions_is_7_1_2() {
        // Enough users that every item lands in someone's train split.
        let text = synthetic_lines(12, 10);
        let log = load_str(&text, 1).unwrap();
        let log = split_roles(log, [0.7, 0.1, 0.2], SplitMode::PerUser, 1).unwrap();
        for (u, counts) in per_user_role_counts(&log).iter().enumerate() {
            assert_eq!(*counts, (7, 1, 2), "user {u}");
        }
    }

    #[test]
    fn split_three_interactions_is_2_0_1() {
        // Expected allocation computed by hand from the boundary rule:
        // floor(0.7*3) = 2 train, floor(0.8*3) = 2 so 0 validation, 1 test.
        let text = synthetic_lines(12, 3);
        let log = load_str(&text, 1).unwrap();
        let log = split_roles(log, [0.7, 0.1, 0.2], SplitMode::PerUser, 1).unwrap();
        for (u, counts) in per_user_role_counts(&log).iter().enumerate() {
            assert_eq!(*counts, (2, 0, 1), "user {u}");
        }
    }

    #[test]
    fn single_interaction_goes_to_train() {
        let log = load_str("0\t0\n", 1).unwrap();
        let log = split_roles(log, [0.7, 0.1, 0.2], SplitMode::PerUser, 1).unwrap();
        assert_eq!(log.triples_with_role(Role::Train).count(), 1);
    }

    #[test]
    fn split_is_deterministic_and_preserves_multiset() {
        let text = synthetic_lines(5, 13);
        let a = split_roles(load_str(&text, 1).unwrap(), [0.7, 0.1, 0.2], SplitMode::PerUser, 9)
            .unwrap();
        let b = split_roles(load_str(&text, 1).unwrap(), [0.7, 0.1, 0.2], SplitMode::PerUser, 9)
            .unwrap();
        assert_eq!(a, b);
        let mut pairs: Vec<(u32, u32)> = a.triples.iter().map(|&(u, i, _)| (u, i)).collect();
        pairs.sort_unstable();
        let mut orig: Vec<(u32, u32)> = load_str(&text, 1)
            .unwrap()
            .triples
            .iter()
            .map(|&(u, i, _)| (u, i))
            .collect();
        orig.sort_unstable();
        assert_eq!(pairs, orig);
    }

    #[test]
    fn val_and_test_items_always_appear_in_train() {
        let text = synthetic_lines(6, 11);
        for seed in 0..5u64 {
            let log =
                split_roles(load_str(&text, 1).unwrap(), [0.7, 0.1, 0.2], SplitMode::PerUser, seed)
                    .unwrap();
            let mut in_train = vec![false; log.num_items];
            for (_, i) in log.triples_with_role(Role::Train) {
                in_train[i as usize] = true;
            }
            for &(_, i, role) in &log.triples {
                if role != Role::Unassigned {
                    assert!(in_train[i as usize], "item {i} missing from train");
                }
            }
        }
    }

    #[test]
    fn timestamps_force_chronological_split() {
        // 'a' users see high item ids first, 'b' users see low ids first, so
        // the chronological split gives them opposite train sets while every
        // item is covered in train by someone.
        let mut text = String::new();
        for u in 0..5 {
            for i in 0..10 {
                text.push_str(&format!("a{u}\t{i}\t{}\n", 100 - i));
                text.push_str(&format!("b{u}\t{i}\t{}\n", 100 + i));
            }
        }
        let log = load_str(&text, 1).unwrap();
        let log = split_roles(log, [0.7, 0.1, 0.2], SplitMode::PerUser, 1).unwrap();
        for (k, &(u, i, role)) in log.triples.iter().enumerate() {
            let name = &log.user_orig[u as usize];
            let expect_train = if name.starts_with('a') { i >= 3 } else { i <= 6 };
            assert_eq!(
                role == Role::Train,
                expect_train,
                "user {name} item {i} triple {k}"
            );
        }
    }

    fn log_with_popularity(pops: &[usize]) -> InteractionLog {
        // Item k gets pops[k] distinct users.
        let mut text = String::new();
        for (item, &p) in pops.iter().enumerate() {
            for u in 0..p {
                text.push_str(&format!("u{u:03}\titem{item}\n"));
            }
        }
        // One filler user touching every item so none are empty.
        for item in 0..pops.len() {
            text.push_str(&format!("zfill\titem{item}\n"));
        }
        let log = load_str(&text, 1).unwrap();
        split_roles(log, [1.0, 0.0, 0.0], SplitMode::PerUser, 0).unwrap()
    }

    #[test]
    fn segments_sorted_popularity_into_equal_groups() {
        let log = log_with_popularity(&[5, 4, 3, 2, 1, 0]);
        let plan = segment_items_by_popularity(&log, 3).unwrap();
        assert_eq!(plan.item_groups, vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
    }

    #[test]
    fn remainder_items_go_to_earliest_groups() {
        let log = log_with_popularity(&[7, 6, 5, 4, 3, 2, 1]);
        let plan = segment_items_by_popularity(&log, 3).unwrap();
        let sizes: Vec<usize> = plan.item_groups.iter().map(|g| g.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
    }

    #[test]
    fn popularity_ties_break_by_ascending_item_id() {
        let log = log_with_popularity(&[1, 4, 4, 1]);
        let plan = segment_items_by_popularity(&log, 2).unwrap();
        assert_eq!(plan.item_groups[0], vec![1, 2]);
        assert_eq!(plan.item_groups[1], vec![0, 3]);
    }

    #[test]
    fn too_many_groups_is_a_config_error() {
        let log = log_with_popularity(&[1, 1]);
        assert!(segment_items_by_popularity(&log, 5).is_err());
    }

    #[test]
    fn segmentation_ignores_input_line_order() {
        let mut lines: Vec<String> = Vec::new();
        for (item, p) in [(0, 5), (1, 4), (2, 3), (3, 2), (4, 2), (5, 1)] {
            for u in 0..p {
                lines.push(format!("u{u:02}\t{item}"));
            }
        }
        let forward = lines.join("\n") + "\n";
        lines.reverse();
        let reversed = lines.join("\n") + "\n";
        let la = split_roles(load_str(&forward, 1).unwrap(), [1.0, 0.0, 0.0], SplitMode::PerUser, 0)
            .unwrap();
        let lb = split_roles(load_str(&reversed, 1).unwrap(), [1.0, 0.0, 0.0], SplitMode::PerUser, 0)
            .unwrap();
        assert_eq!(
            segment_items_by_popularity(&la, 3).unwrap(),
            segment_items_by_popularity(&lb, 3).unwrap()
        );
    }

    #[test]
    fn forced_negative_when_only_one_item_free() {
        let mut text = synthetic_lines(1, 9);
        text.push_str("other\t9\n");
        for i in 0..9 {
            text.push_str(&format!("other\t{i}\n"));
        }
        let log = load_str(&text, 1).unwrap();
        let log = split_roles(log, [1.0, 0.0, 0.0], SplitMode::PerUser, 0).unwrap();
        // User 0 trains on items 0..9; the only candidate negative is item 9.
        let train: Vec<(u32, u32)> = log
            .triples_with_role(Role::Train)
            .filter(|&(u, _)| u == 0)
            .collect();
        let mut r = rng::chacha(3);
        let batch = sample_bpr_from(&train, &log.user_adjacency, log.num_items, 50, &mut r);
        assert!(batch.iter().all(|t| t.negative == 9));
    }

    #[test]
    fn zero_batch_is_empty() {
        let log = load_str(&synthetic_lines(2, 3), 1).unwrap();
        let log = split_roles(log, [1.0, 0.0, 0.0], SplitMode::PerUser, 0).unwrap();
        assert!(sample_bpr_batch(&log, 0, 7).is_empty());
    }

    #[test]
    fn negatives_are_uniform_over_candidates() {
        // One user with a single train item out of 101; the 100 candidate
        // negatives should be hit uniformly. Frequencies must stay within
        // 3 sigma of the uniform expectation, and the chi-squared statistic
        // below its 99.9% critical value for 99 degrees of freedom.
        let mut text = String::from("anchor\titem000\n");
        for i in 1..=100 {
            text.push_str(&format!("anchor2\titem{i:03}\nanchor3\titem{i:03}\n"));
        }
        text.push_str("anchor2\titem000\nanchor3\titem000\n");
        let log = load_str(&text, 1).unwrap();
        let log = split_roles(log, [1.0, 0.0, 0.0], SplitMode::PerUser, 0).unwrap();
        let anchor_user = log.user_orig.iter().position(|s| s == "anchor").unwrap() as u32;
        let item0 = log.item_orig.iter().position(|s| s == "item000").unwrap() as u32;
        let train = vec![(anchor_user, item0)];

        let samples = 100_000usize;
        let mut counts = vec![0u32; log.num_items];
        let mut r = rng::chacha(11);
        for triple in sample_bpr_from(&train, &log.user_adjacency, log.num_items, samples, &mut r)
        {
            counts[triple.negative as usize] += 1;
        }
        assert_eq!(counts[item0 as usize], 0);
        let bins = (log.num_items - 1) as f64;
        let p = 1.0 / bins;
        let expected = samples as f64 * p;
        let sigma = (samples as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            if i as u32 == item0 {
                continue;
            }
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "negative {i} count {c} outside 3 sigma of {expected}"
            );
            let diff = c as f64 - expected;
            chi2 += diff * diff / expected;
        }
        // 99.9% critical value of chi-squared with 99 dof.
        assert!(chi2 < 148.23, "chi2 = {chi2}");
    }

    #[test]
    fn snapshot_round_trips() {
        let log = load_str(&synthetic_lines(4, 11), 1).unwrap();
        let log = split_roles(log, [0.7, 0.1, 0.2], SplitMode::PerUser, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snapshot.bin");
        write_snapshot(&log, &path).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(log, back);
    }
}
