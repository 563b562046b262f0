//! K-nearest-neighbour regression.

use super::BaselineError;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

pub fn knn_fit(x: &[Vec<f64>], y: &[f64], k: usize) -> Result<KnnModel, BaselineError> {
    if k == 0 || k > x.len() {
        return Err(BaselineError::Data(format!(
            "K = {k} must lie in 1..={}",
            x.len()
        )));
    }
    if x.len() != y.len() {
        return Err(BaselineError::Data(format!(
            "{} rows, {} targets",
            x.len(),
            y.len()
        )));
    }
    Ok(KnnModel {
        k,
        x: x.to_vec(),
        y: y.to_vec(),
    })
}

/// Mean target of the `k` nearest training rows by Euclidean distance;
/// equal distances go to the lower row index.
pub fn knn_predict(x: &[Vec<f64>], y: &[f64], q: &[f64], k: usize) -> Result<f64, BaselineError> {
    if k == 0 || k > x.len() {
        return Err(BaselineError::Data(format!(
            "K = {k} must lie in 1..={}",
            x.len()
        )));
    }
    let mut d: Vec<(f64, usize)> = x
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (
                r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                i,
            )
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d[..k].iter().map(|&(_, i)| y[i]).sum::<f64>() / k as f64)
}

impl KnnModel {
    pub fn predict(&self, q: &[f64]) -> f64 {
        knn_predict(&self.x, &self.y, q, self.k).expect("k validated at fit")
    }

    pub fn summary(&self) -> String {
        format!(
            "k_nearest_neighbours\nk = {}\ntraining_points = {}\n",
            self.k,
            self.x.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_and_ties() {
        let x = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
        ];
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(knn_predict(&x, &y, &[1.0, 0.0], 1).unwrap(), 2.0);
        assert_eq!(knn_predict(&x, &y, &[0.3, 0.2], 4).unwrap(), 2.5);
        // the three outer points are equidistant from the origin
        let outer = &x[1..];
        assert_eq!(knn_predict(outer, &y[1..], &[0.0, 0.0], 2).unwrap(), 2.5);
        assert!(knn_predict(&x, &y, &[0.0, 0.0], 5).is_err());
        assert!(knn_fit(&x, &y, 0).is_err());
    }
}
