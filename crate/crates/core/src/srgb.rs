//! The standard sRGB transfer curve.

pub fn decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn encode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn encode_u8(v: f64) -> u8 {
    (encode(v) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_endpoints() {
        assert_eq!(encode(0.0), 0.0);
        assert!((encode(1.0) - 1.0).abs() < 1e-12);
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            assert!((decode(encode(v)) - v).abs() < 1e-12);
        }
        assert_eq!(encode_u8(1.0), 255);
        assert_eq!(encode_u8(-3.0), 0);
    }
}
