//! Binary PGM/PPM encoding of `[1, C, H, W]` samples in [-1, 1].

use resadapter_core::numerics::Tensor;

/// Maps [-1, 1] to [0, 255], rounding half to even.
pub fn to_byte(v: f64) -> u8 {
    let x = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even();
    x as u8
}

/// `P5` for one channel, `P6` for three. The header stores width then height.
pub fn encode(img: &Tensor) -> Result<Vec<u8>, String> {
    let &[n, c, h, w] = img.shape() else {
        return Err(format!("expected a [1, C, H, W] sample, got {:?}", img.shape()));
    };
    if n != 1 {
        return Err(format!("expected a single sample, got batch {n}"));
    }
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(format!("{c} channels cannot be written as PGM/PPM")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_byte(data[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(-7.0), 0);
        // 0 maps to 127.5, which rounds to the even neighbour
        assert_eq!(to_byte(0.0), 128);
    }

    #[test]
    fn header_is_width_then_height() {
        let img = Tensor::zeros([1, 1, 24, 16]);
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n16 24\n255\n"));
        assert_eq!(bytes.len(), b"P5\n16 24\n255\n".len() + 24 * 16);
        let rgb = Tensor::new([1, 3, 1, 2], vec![-1.0, 1.0, 1.0, -1.0, 0.5, 0.5]).unwrap();
        assert_eq!(&encode(&rgb).unwrap()[b"P6\n2 1\n255\n".len()..], &[0, 255, 191, 255, 0, 191]);
        assert!(encode(&Tensor::zeros([1, 2, 2, 2])).is_err());
    }
}
