use super::LabelError;

/// `ln(p[i+1]) - ln(p[i])` for consecutive `(ts_s, price)` samples.
pub fn log_returns(prices: &[(i64, f64)]) -> Result<Vec<f64>, LabelError> {
    if let Some(&(ts_s, price)) = prices.iter().find(|(_, p)| !(*p > 0.0)) {
        return Err(LabelError::NonPositivePrice { ts_s, price });
    }
    Ok(prices.windows(2).map(|w| w[1].1.ln() - w[0].1.ln()).collect())
}

/// Square root of the summed squared log returns; zero for fewer than two
/// samples.
pub fn realized_volatility(prices: &[(i64, f64)]) -> Result<f64, LabelError> {
    Ok(log_returns(prices)?.iter().map(|r| r * r).sum::<f64>().sqrt())
}

/// [`realized_volatility`] over a bare price series.
pub fn realized_volatility_of(prices: &[f64]) -> f64 {
    prices.windows(2).map(|w| (w[1].ln() - w[0].ln()).powi(2)).sum::<f64>().sqrt()
}
