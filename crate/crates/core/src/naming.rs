//! `Changen2-S<classes>-<pairs>` dataset names.

use crate::error::{Error, Result};

fn trim_decimal(whole: usize, frac: usize, digits: usize) -> String {
    if frac == 0 {
        return whole.to_string();
    }
    let frac = format!("{frac:0digits$}");
    format!("{whole}.{}", frac.trim_end_matches('0'))
}

fn format_count(n: usize) -> String {
    if n < 1000 {
        n.to_string()
    } else if n < 1_000_000 {
        format!("{}k", trim_decimal(n / 1000, n % 1000, 3))
    } else {
        format!("{}M", trim_decimal(n / 1_000_000, n % 1_000_000, 6))
    }
}

/// Exact, reversible name: 15000 → `15k`, 1_200_000 → `1.2M`, 512 → `512`.
pub fn name_dataset(classes: usize, pairs: usize) -> String {
    format!("Changen2-S{classes}-{}", format_count(pairs))
}

fn parse_count(text: &str) -> Option<usize> {
    let (number, scale, digits) = match text.strip_suffix('k') {
        Some(rest) => (rest, 1000usize, 3usize),
        None => match text.strip_suffix('M') {
            Some(rest) => (rest, 1_000_000, 6),
            None => (text, 1, 0),
        },
    };
    let (whole, frac) = match number.split_once('.') {
        Some((w, f)) => (w, f),
        None => (number, ""),
    };
    if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if frac.len() > digits || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let whole: usize = whole.parse().ok()?;
    let frac_value: usize = if frac.is_empty() {
        0
    } else {
        frac.parse::<usize>().ok()? * 10usize.pow((digits - frac.len()) as u32)
    };
    whole.checked_mul(scale)?.checked_add(frac_value)
}

/// Inverse of [`name_dataset`].
pub fn parse_dataset_name(name: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parameter(format!("not a dataset name: {name:?}"));
    let rest = name.strip_prefix("Changen2-S").ok_or_else(bad)?;
    let (classes, pairs) = rest.split_once('-').ok_or_else(bad)?;
    let classes: usize = classes.parse().map_err(|_| bad())?;
    let pairs = parse_count(pairs).ok_or_else(bad)?;
    if name_dataset(classes, pairs) != name {
        return Err(bad());
    }
    Ok((classes, pairs))
}
