use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Dataset, VideoAnnotation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Checks disjointness and that every id exists in `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("video `{id}` appears in more than one split")));
            }
            if dataset.video(id).is_none() {
                return Err(Error::Invalid(format!("split references unknown video `{id}`")));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Ids for a named part: `train`, `val` or `test`.
    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitOrdering {
    /// Natural order of video ids, so `video2` precedes `video10`.
    #[default]
    NaturalId,
    /// The order the videos were passed in.
    AsGiven,
}

/// Assigns the first `train` videos to training, the next `val` to
/// validation and the next `test` to testing. Remaining videos are unused.
pub fn make_split(
    videos: &[VideoAnnotation],
    counts: (usize, usize, usize),
    ordering: SplitOrdering,
) -> Result<DatasetSplit> {
    let (train, val, test) = counts;
    let needed = train + val + test;
    if needed > videos.len() {
        return Err(Error::Config(format!(
            "split counts {train}/{val}/{test} need {needed} videos but only {} exist",
            videos.len()
        )));
    }
    let mut ids: Vec<String> = videos.iter().map(|v| v.video_id.clone()).collect();
    if ordering == SplitOrdering::NaturalId {
        ids.sort_by(|a, b| natural_cmp(a, b));
    }
    Ok(DatasetSplit {
        train: ids[..train].to_vec(),
        val: ids[train..train + val].to_vec(),
        test: ids[train + val..needed].to_vec(),
    })
}

/// Compares strings treating embedded digit runs as numbers.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut ai, mut bi) = (a.char_indices().peekable(), b.char_indices().peekable());
    loop {
        match (ai.peek().copied(), bi.peek().copied()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some((_, ca)), Some((_, cb))) if ca.is_ascii_digit() && cb.is_ascii_digit() => {
                let na = take_digits(&mut ai);
                let nb = take_digits(&mut bi);
                let ta = na.trim_start_matches('0');
                let tb = nb.trim_start_matches('0');
                let ord = ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb));
                if ord != Ordering::Equal {
                    return ord;
                }
            }
            (Some((_, ca)), Some((_, cb))) => {
                if ca != cb {
                    return ca.cmp(&cb);
                }
                ai.next();
                bi.next();
            }
        }
    }
}

fn take_digits(it: &mut std::iter::Peekable<std::str::CharIndices<'_>>) -> String {
    let mut s = String::new();
    while let Some(&(_, c)) = it.peek() {
        if !c.is_ascii_digit() {
            break;
        }
        s.push(c);
        it.next();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Phase;

    fn videos(n: usize) -> Vec<VideoAnnotation> {
        (1..=n)
            .map(|i| {
                VideoAnnotation::new(format!("video{i}"), 1.0, vec![Phase::from_index(0)], None, 1)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn table_two_split_sizes() {
        for (n, counts) in [(80, (32, 8, 40)), (21, (10, 4, 7)), (41, (20, 7, 14)), (3, (3, 0, 0))] {
            let s = make_split(&videos(n), counts, SplitOrdering::NaturalId).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), counts);
        }
    }

    #[test]
    fn split_uses_natural_order_and_is_deterministic() {
        let mut v = videos(12);
        v.reverse();
        let s = make_split(&v, (2, 1, 1), SplitOrdering::NaturalId).unwrap();
        assert_eq!(s.train, vec!["video1", "video2"]);
        assert_eq!(s.val, vec!["video3"]);
        assert_eq!(s.test, vec!["video4"]);
        assert_eq!(s, make_split(&v, (2, 1, 1), SplitOrdering::NaturalId).unwrap());
        let given = make_split(&v, (1, 0, 0), SplitOrdering::AsGiven).unwrap();
        assert_eq!(given.train, vec!["video12"]);
    }

    #[test]
    fn oversized_counts_are_rejected() {
        assert!(make_split(&videos(3), (2, 1, 1), SplitOrdering::NaturalId).is_err());
    }

    #[test]
    fn natural_ordering() {
        assert_eq!(natural_cmp("video2", "video10"), Ordering::Less);
        assert_eq!(natural_cmp("video02", "video2"), Ordering::Less);
        assert_eq!(natural_cmp("a", "b"), Ordering::Less);
        assert_eq!(natural_cmp("v10a", "v10b"), Ordering::Less);
    }
}
