//! Digit serialization of a univariate series.
//!
//! A series is affinely rescaled so that its `alpha`-percentile (after an
//! offset below the minimum) maps to 1, then every value is written with a
//! fixed number of decimal digits and the decimal point removed:
//! `-1.348, -0.74` becomes `"-1348,-740"`. With a single-character tokenizer
//! every digit, minus sign and comma is its own token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_BETA: f64 = 0.3;
pub const DEFAULT_PRECISION: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub alpha: f64,
    pub beta: f64,
    /// Scale, always positive.
    pub a: f64,
    /// Offset.
    pub b: f64,
    /// Set when the fitted scale was zero and `a` fell back to 1.
    #[serde(default)]
    pub degenerate: bool,
}

impl ScalingParams {
    pub fn identity() -> Self {
        ScalingParams {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            a: 1.0,
            b: 0.0,
            degenerate: false,
        }
    }

    pub fn scale(&self, v: f64) -> f64 {
        (v - self.b) / self.a
    }

    pub fn unscale(&self, s: f64) -> f64 {
        s * self.a + self.b
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn fit_scaling(series: &[f64], alpha: f64, beta: f64) -> Result<ScalingParams> {
    if series.is_empty() {
        return Err(Error::invalid("cannot fit scaling to an empty series"));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite value at index {i}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let b = min - beta * (max - min);
    let mut shifted: Vec<f64> = series.iter().map(|v| v - b).collect();
    shifted.sort_by(f64::total_cmp);
    let a = percentile(&shifted, alpha);
    if a > 0.0 && a.is_finite() {
        Ok(ScalingParams {
            alpha,
            beta,
            a,
            b,
            degenerate: false,
        })
    } else {
        Ok(ScalingParams {
            alpha,
            beta,
            a: 1.0,
            b: min,
            degenerate: true,
        })
    }
}

/// Character span of one time step inside [`DigitSeries::text`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpan {
    /// First character of the number.
    pub start: usize,
    /// Last character of the number (inclusive).
    pub end: usize,
    /// Index of the comma that follows, absent for the final step.
    pub separator: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitSeries {
    pub text: String,
    pub precision: u32,
    pub spans: Vec<StepSpan>,
}

impl DigitSeries {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Text handed to a model for continuation: the series plus a trailing separator.
    pub fn prompt(&self) -> String {
        format!("{},", self.text)
    }

    /// Re-derives spans for already serialized text.
    pub fn from_text(text: &str, precision: u32) -> Result<Self> {
        parse_literals(text)?;
        Ok(DigitSeries {
            text: text.to_owned(),
            precision,
            spans: spans_of(text),
        })
    }
}

fn spans_of(text: &str) -> Vec<StepSpan> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, byte) in text.bytes().enumerate() {
        if byte == b',' {
            spans.push(StepSpan {
                start,
                end: i - 1,
                separator: Some(i),
            });
            start = i + 1;
        }
    }
    spans.push(StepSpan {
        start,
        end: text.len() - 1,
        separator: None,
    });
    spans
}

/// Rounds a scaled value to an integer literal, half away from zero.
pub fn quantize(scaled: f64, precision: u32) -> Result<i64> {
    let k = (scaled * 10f64.powi(precision as i32)).round();
    if !k.is_finite() || k.abs() >= 9.0e15 {
        return Err(Error::invalid(format!("value {scaled} cannot be serialized")));
    }
    // `as` maps -0.0 to 0, which normalizes negative zero.
    Ok(k as i64)
}

pub fn serialize(series: &[f64], params: &ScalingParams, precision: u32) -> Result<DigitSeries> {
    if precision == 0 {
        return Err(Error::invalid("precision must be at least 1"));
    }
    if series.is_empty() {
        return Err(Error::invalid("cannot serialize an empty series"));
    }
    let mut text = String::with_capacity(series.len() * 6);
    let mut spans = Vec::with_capacity(series.len());
    for (i, &v) in series.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite value at index {i}")));
        }
        if i > 0 {
            let last: &mut StepSpan = spans.last_mut().expect("previous span");
            last.separator = Some(text.len());
            text.push(',');
        }
        let start = text.len();
        let k = quantize(params.scale(v), precision)?;
        text.push_str(&k.to_string());
        spans.push(StepSpan {
            start,
            end: text.len() - 1,
            separator: None,
        });
    }
    Ok(DigitSeries { text, precision, spans })
}

/// Parses one signed integer literal; `offset` locates it in the enclosing text.
pub fn parse_literal(literal: &str, offset: usize) -> Result<i64> {
    let digits = literal.strip_prefix('-').unwrap_or(literal);
    if digits.is_empty() {
        return Err(Error::Parse {
            offset,
            message: "empty literal".into(),
        });
    }
    if let Some(pos) = digits.bytes().position(|b| !b.is_ascii_digit()) {
        let at = offset + (literal.len() - digits.len()) + pos;
        return Err(Error::Parse {
            offset: at,
            message: format!("unexpected character {:?}", literal[at - offset..].chars().next().unwrap_or('?')),
        });
    }
    literal.parse::<i64>().map_err(|e| Error::Parse {
        offset,
        message: e.to_string(),
    })
}

fn parse_literals(text: &str) -> Result<Vec<i64>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for literal in text.split(',') {
        out.push(parse_literal(literal, offset)?);
        offset += literal.len() + 1;
    }
    Ok(out)
}

/// Inverse of [`serialize`] up to quantization.
pub fn parse(digits: &DigitSeries, params: &ScalingParams) -> Result<Vec<f64>> {
    parse_text(&digits.text, params, digits.precision)
}

pub fn parse_text(text: &str, params: &ScalingParams, precision: u32) -> Result<Vec<f64>> {
    let scale = 10f64.powi(precision as i32);
    Ok(parse_literals(text)?
        .into_iter()
        .map(|k| params.unscale(k as f64 / scale))
        .collect())
}

/// Token range covering one time step's number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTokens {
    pub first: usize,
    pub last: usize,
    /// Token whose residual stands for this step: the last token of the number.
    pub representative: usize,
}

/// Maps each step to the tokens covering its number. `token_lengths` must
/// partition `digits.text` exactly (character counts per token).
pub fn align_tokens(digits: &DigitSeries, token_lengths: &[usize]) -> Result<Vec<StepTokens>> {
    let total: usize = token_lengths.iter().sum();
    if total != digits.text.len() {
        return Err(Error::Alignment(format!(
            "tokens cover {total} characters, text has {}",
            digits.text.len()
        )));
    }
    if let Some(i) = token_lengths.iter().position(|&l| l == 0) {
        return Err(Error::Alignment(format!("token {i} is empty")));
    }
    let mut token_of_char = Vec::with_capacity(total);
    for (j, &len) in token_lengths.iter().enumerate() {
        token_of_char.extend(std::iter::repeat_n(j, len));
    }
    let mut steps = Vec::with_capacity(digits.spans.len());
    for (t, span) in digits.spans.iter().enumerate() {
        let first = token_of_char[span.start];
        let last = token_of_char[span.end];
        if let Some(prev) = steps.last().map(|s: &StepTokens| s.last) {
            if first <= prev {
                return Err(Error::Alignment(format!("token {first} straddles steps {} and {t}", t - 1)));
            }
        }
        steps.push(StepTokens {
            first,
            last,
            representative: last,
        });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_string() {
        let scaled = [-1.348, -0.74, -0.054, 0.582, 1.050];
        let digits = serialize(&scaled, &ScalingParams::identity(), 3).unwrap();
        assert_eq!(digits.text, "-1348,-740,-54,582,1050");
    }

    #[test]
    fn offset_from_range() {
        let p = fit_scaling(&[0.0, 1.0], 0.99, 0.3).unwrap();
        assert!((p.b - -0.3).abs() < 1e-15);
        assert!(!p.degenerate);
    }

    #[test]
    fn constant_series_falls_back() {
        let p = fit_scaling(&[5.0, 5.0, 5.0], 0.99, 0.3).unwrap();
        assert_eq!((p.a, p.b, p.degenerate), (1.0, 5.0, true));
        let digits = serialize(&[5.0, 5.0], &p, 3).unwrap();
        assert_eq!(digits.text, "0,0");
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_scaling(&[], 0.99, 0.3).is_err());
        assert!(fit_scaling(&[1.0, f64::NAN], 0.99, 0.3).is_err());
        assert!(fit_scaling(&[1.0], 0.0, 0.3).is_err());
    }

    #[test]
    fn zero_and_half_rounding() {
        let id = ScalingParams::identity();
        assert_eq!(serialize(&[0.0], &id, 3).unwrap().text, "0");
        assert_eq!(serialize(&[-0.0], &id, 3).unwrap().text, "0");
        assert_eq!(serialize(&[-0.0001], &id, 3).unwrap().text, "0");
        assert_eq!(serialize(&[0.0005], &id, 3).unwrap().text, "1");
        assert_eq!(serialize(&[-0.0005], &id, 3).unwrap().text, "-1");
    }

    #[test]
    fn serialize_rejects_non_finite_and_zero_precision() {
        let id = ScalingParams::identity();
        assert!(serialize(&[1.0, f64::INFINITY], &id, 3).is_err());
        assert!(serialize(&[1.0], &id, 0).is_err());
    }

    #[test]
    fn spans_and_separators() {
        let digits = serialize(&[-1.348, -0.74], &ScalingParams::identity(), 3).unwrap();
        assert_eq!(
            digits.spans,
            vec![
                StepSpan { start: 0, end: 4, separator: Some(5) },
                StepSpan { start: 6, end: 9, separator: None },
            ]
        );
        assert_eq!(digits.prompt(), "-1348,-740,");
        assert_eq!(DigitSeries::from_text(&digits.text, 3).unwrap(), digits);
    }

    #[test]
    fn parse_inverts_example() {
        let values = parse_text("-1348", &ScalingParams::identity(), 3).unwrap();
        assert_eq!(values, vec![-1.348]);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let id = ScalingParams::identity();
        match parse_text("12,34,", &id, 3) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        match parse_text("12,3x4", &id, 3) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(parse_text("-", &id, 3).is_err());
        assert!(parse_text("+5", &id, 3).is_err());
    }

    #[test]
    fn align_single_character_tokens() {
        let digits = DigitSeries::from_text("-1348,-740", 3).unwrap();
        let steps = align_tokens(&digits, &[1; 10]).unwrap();
        assert_eq!(steps[0], StepTokens { first: 0, last: 4, representative: 4 });
        assert_eq!(steps[1], StepTokens { first: 6, last: 9, representative: 9 });
    }

    #[test]
    fn align_single_step() {
        let digits = DigitSeries::from_text("7", 3).unwrap();
        assert_eq!(align_tokens(&digits, &[1]).unwrap()[0].representative, 0);
    }

    #[test]
    fn align_mixed_length_tokens() {
        let digits = DigitSeries::from_text("12,34", 3).unwrap();
        let reps: Vec<_> = align_tokens(&digits, &[2, 1, 2]).unwrap().iter().map(|s| s.representative).collect();
        assert_eq!(reps, [0, 2]);
    }

    #[test]
    fn align_exhaustive_partitions() {
        // Every composition of "12,34" into tokens: alignment either fails because a
        // token crosses the separator, or each step's range covers exactly its digits.
        let digits = DigitSeries::from_text("12,34", 3).unwrap();
        let n = digits.text.len();
        for mask in 0u32..(1 << (n - 1)) {
            let mut lengths = Vec::new();
            let mut current = 1;
            for i in 0..n - 1 {
                if mask & (1 << i) != 0 {
                    lengths.push(current);
                    current = 1;
                } else {
                    current += 1;
                }
            }
            lengths.push(current);
            let mut bounds = vec![0];
            for l in &lengths {
                bounds.push(bounds.last().unwrap() + l);
            }
            let comma_isolated = bounds.contains(&2) && bounds.contains(&3);
            match align_tokens(&digits, &lengths) {
                Ok(steps) => {
                    assert!(steps[0].representative < steps[1].first);
                    for (t, span) in digits.spans.iter().enumerate() {
                        assert!(bounds[steps[t].first] <= span.start);
                        assert!(bounds[steps[t].last + 1] > span.end);
                    }
                }
                Err(_) => assert!(!comma_isolated, "{lengths:?}"),
            }
        }
    }

    #[test]
    fn align_requires_exact_cover() {
        let digits = DigitSeries::from_text("12,34", 3).unwrap();
        assert!(align_tokens(&digits, &[1, 1, 1]).is_err());
        assert!(align_tokens(&digits, &[2, 0, 1, 2]).is_err());
    }

    #[test]
    fn percentile_fraction_matches_alpha() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let series: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..5.0)).collect();
        let p = fit_scaling(&series, 0.99, 0.3).unwrap();
        let below = series.iter().filter(|&&v| p.scale(v) <= 1.0).count() as f64 / 1000.0;
        assert!((below - 0.99).abs() <= 1.0 / 1000.0);
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(series in prop::collection::vec(-1e4f64..1e4, 1..200)) {
            let p = fit_scaling(&series, DEFAULT_ALPHA, DEFAULT_BETA).unwrap();
            let digits = serialize(&series, &p, 3).unwrap();
            let back = parse(&digits, &p).unwrap();
            prop_assert_eq!(back.len(), series.len());
            let bound = p.a * 0.5e-3 * (1.0 + 1e-9) + 1e-12 * p.b.abs();
            for (x, y) in series.iter().zip(&back) {
                prop_assert!((x - y).abs() <= bound, "{} vs {} bound {}", x, y, bound);
            }
            prop_assert_eq!(digits.text.split(',').count(), series.len());
        }

        #[test]
        fn serialization_is_monotone(mut series in prop::collection::vec(-50f64..50.0, 2..100)) {
            series.sort_by(f64::total_cmp);
            let p = fit_scaling(&series, DEFAULT_ALPHA, DEFAULT_BETA).unwrap();
            let digits = serialize(&series, &p, 3).unwrap();
            let ints: Vec<i64> = digits.text.split(',').map(|s| s.parse().unwrap()).collect();
            prop_assert!(ints.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn representatives_increase(series in prop::collection::vec(-50f64..50.0, 1..60)) {
            let p = fit_scaling(&series, DEFAULT_ALPHA, DEFAULT_BETA).unwrap();
            let digits = serialize(&series, &p, 3).unwrap();
            let steps = align_tokens(&digits, &vec![1; digits.text.len()]).unwrap();
            prop_assert!(steps.windows(2).all(|w| w[0].representative < w[1].representative));
            for (s, span) in steps.iter().zip(&digits.spans) {
                prop_assert_eq!(s.representative, span.end);
            }
        }
    }
}
