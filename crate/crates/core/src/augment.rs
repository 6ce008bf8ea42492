//! Candidate relation sampling and construction of the sentence/relation
//! pair rows fed to the encoder.
//!
//! Row layout: `[CLS] sentence [SEP] relation [SEP] [PAD]*`. Sentence
//! subtokens occupy row positions `1..=sentence_len`; position 0 is the
//! leading marker, which doubles as the "no span" sentinel for boundary
//! targets.

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::corpus::{Instance, RelationLabel, Span, Triplet};
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// Row position of the first sentence subtoken.
pub const SENTENCE_OFFSET: usize = 1;

/// Training candidates: every gold relation of the instance plus `g - k`
/// distinct irrelevant relations drawn from `label_pool`, shuffled.
pub fn sample_candidates<R: Rng + ?Sized>(
    instance: &Instance,
    label_pool: &[RelationLabel],
    g: usize,
    rng: &mut R,
) -> Result<Vec<RelationLabel>> {
    let gold = instance.gold_relations();
    if gold.len() > g {
        return Err(Error::Config(format!(
            "instance {} has {} distinct relations but the group size is {g}; raise the group size",
            instance.id,
            gold.len()
        )));
    }
    for label in &gold {
        if !label_pool.iter().any(|l| l.id == label.id) {
            return Err(Error::Config(format!(
                "gold relation {:?} of instance {} is missing from the label pool",
                label.text, instance.id
            )));
        }
    }
    let negatives: Vec<&RelationLabel> = label_pool
        .iter()
        .filter(|l| !gold.iter().any(|g| g.id == l.id))
        .collect();
    let need = g - gold.len();
    if negatives.len() < need {
        return Err(Error::Config(format!(
            "label pool has {} irrelevant relations, {need} needed for group size {g}",
            negatives.len()
        )));
    }
    let mut candidates = gold;
    candidates.extend(negatives.choose_multiple(rng, need).map(|&l| l.clone()));
    candidates.shuffle(rng);
    Ok(candidates)
}

/// Evaluation candidates: the whole label set, ordered by label id.
pub fn all_candidates(labels: &[RelationLabel]) -> Result<Vec<RelationLabel>> {
    if labels.is_empty() {
        return Err(Error::Config("candidate label set is empty".into()));
    }
    let mut out = labels.to_vec();
    out.sort_by_key(|l| l.id);
    Ok(out)
}

/// Per-row bookkeeping of where things sit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowLayout {
    /// Sentence subtokens kept in this row (after truncation).
    pub sentence_len: usize,
    pub relation_len: usize,
    /// Per sentence word, inclusive subtoken range relative to the sentence
    /// start; `None` for words lost to truncation.
    pub alignment: Vec<Option<(usize, usize)>>,
}

impl RowLayout {
    /// Row position of the separator after the sentence.
    pub fn first_sep(&self) -> usize {
        SENTENCE_OFFSET + self.sentence_len
    }

    /// Row positions `[first, last]` of a word span, if fully retained.
    pub fn span_positions(&self, span: Span) -> Option<(usize, usize)> {
        let (first, _) = (*self.alignment.get(span.start)?)?;
        let (_, last) = (*self.alignment.get(span.end)?)?;
        Some((first + SENTENCE_OFFSET, last + SENTENCE_OFFSET))
    }

    /// Maps row positions back to the word span they cover.
    pub fn word_span(&self, start_pos: usize, end_pos: usize) -> Option<Span> {
        if start_pos < SENTENCE_OFFSET || end_pos < start_pos {
            return None;
        }
        let (s, e) = (start_pos - SENTENCE_OFFSET, end_pos - SENTENCE_OFFSET);
        let word_of = |sub: usize| {
            self.alignment
                .iter()
                .position(|a| matches!(a, Some((f, l)) if *f <= sub && sub <= *l))
        };
        Some(Span::new(word_of(s)?, word_of(e)?))
    }

    /// Positions a boundary distribution may put mass on: the sentinel and
    /// the sentence subtokens.
    pub fn boundary_mask(&self, max_len: usize) -> Vec<bool> {
        (0..max_len)
            .map(|p| p == 0 || (SENTENCE_OFFSET..=self.sentence_len).contains(&p))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedGroup {
    pub token_ids: Array2<u32>,
    pub segment_ids: Array2<u32>,
    pub attention_mask: Array2<u8>,
    pub candidates: Vec<RelationLabel>,
    pub gold_mask: Vec<bool>,
    pub rows: Vec<RowLayout>,
}

impl AugmentedGroup {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.token_ids.ncols()
    }

    pub fn key_mask(&self, row: usize) -> Vec<bool> {
        self.attention_mask.row(row).iter().map(|&m| m == 1).collect()
    }

    /// Gold boundary quadruples `[h_start, h_end, t_start, t_end]` in row
    /// positions for every triplet of `row`'s candidate relation. Triplets
    /// touching truncated words are skipped.
    pub fn gold_quads(&self, row: usize, triplets: &[Triplet]) -> Vec<[usize; 4]> {
        let layout = &self.rows[row];
        let relation = &self.candidates[row];
        triplets
            .iter()
            .filter(|t| t.relation.id == relation.id)
            .filter_map(|t| {
                let quad = layout
                    .span_positions(t.head)
                    .zip(layout.span_positions(t.tail))
                    .map(|((hs, he), (ts, te))| [hs, he, ts, te]);
                if quad.is_none() {
                    log::warn!("triplet for {:?} lost to truncation", relation.text);
                }
                quad
            })
            .collect()
    }
}

/// Builds one row per candidate. Rows longer than `max_len` lose sentence
/// tail subtokens; the relation text is kept whole.
pub fn build_group(
    words: &[String],
    candidates: &[RelationLabel],
    gold: &[RelationLabel],
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<AugmentedGroup> {
    let sentence = tokenizer.encode_words(words);
    if sentence.ids.is_empty() {
        return Err(Error::Input("sentence has no subtokens".into()));
    }
    let g = candidates.len();
    let pad = tokenizer.pad_id();
    let mut token_ids = Array2::from_elem((g, max_len), pad);
    let mut segment_ids = Array2::zeros((g, max_len));
    let mut attention_mask = Array2::zeros((g, max_len));
    let mut rows = Vec::with_capacity(g);

    for (r, cand) in candidates.iter().enumerate() {
        let relation = tokenizer.encode_text(&cand.text);
        let budget = max_len
            .checked_sub(3 + relation.len())
            .filter(|&b| b >= 1)
            .ok_or_else(|| {
                Error::Input(format!(
                    "relation {:?} leaves no room for the sentence within {max_len} positions",
                    cand.text
                ))
            })?;
        let sentence_len = sentence.ids.len().min(budget);
        if sentence_len < sentence.ids.len() {
            log::warn!(
                "truncating sentence from {} to {sentence_len} subtokens for relation {:?}",
                sentence.ids.len(),
                cand.text
            );
        }
        let mut row = Vec::with_capacity(max_len);
        row.push(tokenizer.cls_id());
        row.extend_from_slice(&sentence.ids[..sentence_len]);
        row.push(tokenizer.sep_id());
        let relation_start = row.len();
        row.extend_from_slice(&relation);
        row.push(tokenizer.sep_id());
        for (p, &id) in row.iter().enumerate() {
            token_ids[[r, p]] = id;
            attention_mask[[r, p]] = 1;
            if p >= relation_start {
                segment_ids[[r, p]] = 1;
            }
        }
        let alignment = sentence
            .word_offsets
            .iter()
            .map(|&(f, l)| (f < sentence_len).then(|| (f, l.min(sentence_len - 1))))
            .collect();
        rows.push(RowLayout {
            sentence_len,
            relation_len: relation.len(),
            alignment,
        });
    }

    Ok(AugmentedGroup {
        token_ids,
        segment_ids,
        attention_mask,
        gold_mask: candidates
            .iter()
            .map(|c| gold.iter().any(|g| g.id == c.id))
            .collect(),
        candidates: candidates.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSet;
    use crate::tokenizer::{WordPiece, CLS, MASK, PAD, SEP, UNK};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn richard() -> (Instance, LabelSet) {
        let labels = LabelSet::from_texts([
            "member of political party",
            "position held",
            "country of citizenship",
            "employer",
        ])
        .unwrap();
        let words: Vec<String> = "Richard is a Democratic politician in the United States ."
            .split(' ')
            .map(String::from)
            .collect();
        let inst = Instance {
            id: "r".into(),
            words,
            triplets: vec![
                Triplet {
                    head: Span::new(0, 0),
                    tail: Span::new(3, 4),
                    relation: labels.get(0).unwrap().clone(),
                },
                Triplet {
                    head: Span::new(0, 0),
                    tail: Span::new(6, 8),
                    relation: labels.get(2).unwrap().clone(),
                },
            ],
        };
        (inst, labels)
    }

    fn tokenizer() -> WordPiece {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].map(String::from).to_vec();
        for t in [
            "richard", "is", "a", "democ", "##ratic", "politician", "in", "the", "united",
            "states", ".", "member", "of", "political", "party", "position", "held", "country",
            "citizenship", "employer",
        ] {
            tokens.push(t.into());
        }
        WordPiece::new(tokens, true).unwrap()
    }

    #[test]
    fn sampled_candidates_contain_gold() {
        let (inst, labels) = richard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_candidates(&inst, labels.as_slice(), 3, &mut rng).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().any(|l| l.text == "member of political party"));
        assert!(c.iter().any(|l| l.text == "country of citizenship"));
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(c, sample_candidates(&inst, labels.as_slice(), 3, &mut rng2).unwrap());
    }

    #[test]
    fn group_size_equal_to_gold_count_gives_gold_only() {
        let (inst, labels) = richard();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = sample_candidates(&inst, labels.as_slice(), 2, &mut rng).unwrap();
        c.sort();
        assert_eq!(c, inst.gold_relations());
        assert!(matches!(
            sample_candidates(&inst, labels.as_slice(), 1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn all_candidates_is_sorted_and_nonempty() {
        let (_, labels) = richard();
        let mut shuffled = labels.as_slice().to_vec();
        shuffled.reverse();
        assert_eq!(all_candidates(&shuffled).unwrap(), labels.as_slice());
        assert_eq!(all_candidates(&shuffled[..1]).unwrap().len(), 1);
        assert!(all_candidates(&[]).is_err());
    }

    #[test]
    fn group_layout_matches_pair_format() {
        let (inst, labels) = richard();
        let tok = tokenizer();
        let cands = &labels.as_slice()[..3];
        let group = build_group(&inst.words, cands, &inst.gold_relations(), &tok, 32).unwrap();
        assert_eq!(group.len(), 3);
        assert_eq!(group.gold_mask, vec![true, false, true]);
        let row1: Vec<&str> = group
            .token_ids
            .row(1)
            .iter()
            .map(|&i| tok.token(i).unwrap())
            .take_while(|&t| t != PAD)
            .collect();
        assert_eq!(
            row1.join(" "),
            "[CLS] richard is a democ ##ratic politician in the united states . [SEP] position held [SEP]"
        );
        // segment 1 exactly on relation text and its trailing marker
        let segs: Vec<u32> = group.segment_ids.row(1).iter().copied().take(row1.len()).collect();
        let ones: Vec<usize> = (0..segs.len()).filter(|&p| segs[p] == 1).collect();
        assert_eq!(ones, vec![13, 14, 15]);
        assert_eq!(group.rows[1].alignment[3], Some((3, 4)));
    }

    #[test]
    fn alignment_round_trips_through_tokens() {
        let (inst, labels) = richard();
        let tok = tokenizer();
        let group = build_group(&inst.words, &labels.as_slice()[..1], &[], &tok, 32).unwrap();
        let layout = &group.rows[0];
        for (w, word) in inst.words.iter().enumerate() {
            let (first, last) = layout.alignment[w].unwrap();
            assert!(first <= last && last < layout.sentence_len);
            let rebuilt: String = (first..=last)
                .map(|s| {
                    let id = group.token_ids[[0, s + SENTENCE_OFFSET]];
                    tok.token(id).unwrap().trim_start_matches("##").to_string()
                })
                .collect();
            assert_eq!(rebuilt, word.to_lowercase());
        }
    }

    #[test]
    fn permuted_candidates_permute_rows() {
        let (inst, labels) = richard();
        let tok = tokenizer();
        let a = &labels.as_slice()[..3];
        let b = vec![a[2].clone(), a[0].clone(), a[1].clone()];
        let ga = build_group(&inst.words, a, &[], &tok, 24).unwrap();
        let gb = build_group(&inst.words, &b, &[], &tok, 24).unwrap();
        assert_eq!(gb.token_ids.row(0), ga.token_ids.row(2));
        assert_eq!(gb.token_ids.row(1), ga.token_ids.row(0));
        assert_eq!(gb.segment_ids.row(2), ga.segment_ids.row(1));
    }

    #[test]
    fn truncation_drops_sentence_tail_only() {
        let (inst, labels) = richard();
        let tok = tokenizer();
        let group = build_group(&inst.words, &labels.as_slice()[..1], &[], &tok, 13).unwrap();
        let layout = &group.rows[0];
        assert_eq!(layout.relation_len, 4);
        assert_eq!(layout.sentence_len, 13 - 3 - 4);
        assert!(layout.alignment[9].is_none());
        assert_eq!(group.attention_mask.row(0).iter().filter(|&&m| m == 1).count(), 13);
        assert_eq!(group.gold_quads(0, &inst.triplets), vec![[1, 1, 4, 6]]);
        assert!(build_group(&inst.words, &labels.as_slice()[..1], &[], &tok, 7).is_err());
    }

    #[test]
    fn gold_quads_and_back_mapping() {
        let (inst, labels) = richard();
        let tok = tokenizer();
        let group =
            build_group(&inst.words, &labels.as_slice()[..3], &inst.gold_relations(), &tok, 32)
                .unwrap();
        assert_eq!(group.gold_quads(2, &inst.triplets), vec![[1, 1, 8, 10]]);
        assert!(group.gold_quads(1, &inst.triplets).is_empty());
        let layout = &group.rows[0];
        assert_eq!(layout.word_span(4, 5), Some(Span::new(3, 3)));
        assert_eq!(layout.word_span(4, 6), Some(Span::new(3, 4)));
        assert_eq!(layout.word_span(0, 1), None);
        let mask = layout.boundary_mask(32);
        assert!(mask[0] && mask[1] && mask[11] && !mask[12]);
    }
}
