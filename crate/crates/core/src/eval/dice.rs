use crate::error::{Error, Result};

/// `2 |P & G| / (|P| + |G|)`, with 1.0 when both masks are empty.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("dice", format!("{} predicted voxels vs {} ground-truth voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        inter += usize::from(*p && *g);
        np += usize::from(*p);
        ng += usize::from(*g);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(dice_score(&[true, true, false], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(dice_score(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dice_score(&[true, true, false], &[false, true, true]).unwrap(), 0.5);
        assert_eq!(dice_score(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(dice_score(&[true], &[true, false]).is_err());
    }
}
