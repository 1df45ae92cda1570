use crate::data::Span;
use crate::error::{Error, Result};

fn check(s: &Span, what: &str) -> Result<()> {
    if !s.is_valid() {
        return Err(Error::Contract(format!(
            "{what} span [{}, {}] is degenerate",
            s.start, s.end
        )));
    }
    Ok(())
}

/// `(min(e₁,e₂) − max(s₁,s₂)) / (max(e₁,e₂) − min(s₁,s₂))`, clamped at 0.
pub fn temporal_iou(a: &Span, b: &Span) -> Result<f64> {
    check(a, "first")?;
    check(b, "second")?;
    let inter = a.end.min(b.end) - a.start.max(b.start);
    let hull = a.end.max(b.end) - a.start.min(b.start);
    Ok((inter / hull).max(0.0))
}

/// Fraction of `gt` overlapped by `pred`, clamped to `[0, 1]`.
pub fn coverage(pred: &Span, gt: &Span) -> Result<f64> {
    check(pred, "predicted")?;
    check(gt, "ground-truth")?;
    let inter = pred.end.min(gt.end) - pred.start.max(gt.start);
    Ok((inter / gt.len()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(a: f64, b: f64) -> Span {
        Span::new(a, b)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(&s(1.0, 4.0), &s(1.0, 4.0)).unwrap(), 1.0);
        assert!((temporal_iou(&s(0.0, 10.0), &s(5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou(&s(0.0, 5.0), &s(10.0, 15.0)).unwrap(), 0.0);
        assert!(matches!(
            temporal_iou(&s(2.0, 2.0), &s(0.0, 1.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage(&s(0.0, 10.0), &s(2.0, 3.0)).unwrap(), 1.0);
        assert_eq!(coverage(&s(0.0, 10.0), &s(5.0, 15.0)).unwrap(), 0.5);
        assert_eq!(coverage(&s(0.0, 1.0), &s(5.0, 15.0)).unwrap(), 0.0);
        assert!(coverage(&s(0.0, 1.0), &s(3.0, 3.0)).is_err());
    }

    #[test]
    fn iou_symmetric_coverage_not() {
        let (a, b) = (s(0.0, 10.0), s(5.0, 7.0));
        assert_eq!(temporal_iou(&a, &b).unwrap(), temporal_iou(&b, &a).unwrap());
        assert_ne!(coverage(&a, &b).unwrap(), coverage(&b, &a).unwrap());
    }
}
