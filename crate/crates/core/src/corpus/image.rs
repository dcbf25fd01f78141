use super::CorpusError;

/// An RGB image with channel-last, row-major values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageArray {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, CorpusError> {
        if data.len() != height * width * 3 {
            return Err(CorpusError::Geometry(format!(
                "{} values cannot fill a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CorpusError::Geometry(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Splits into `(H/P)·(W/P)` patch vectors of length `3P²`, row-major
    /// over the patch grid; inside a patch, pixels are row-major with
    /// interleaved channels.
    pub fn patchify(&self, patch: usize) -> Result<Vec<Vec<f64>>, CorpusError> {
        check_divisible(self.height, self.width, patch)?;
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(gh * gw);
        for py in 0..gh {
            for px in 0..gw {
                let mut v = Vec::with_capacity(3 * patch * patch);
                for y in 0..patch {
                    let row = (py * patch + y) * self.width + px * patch;
                    v.extend_from_slice(&self.data[row * 3..(row + patch) * 3]);
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Inverse of [`ImageArray::patchify`].
    pub fn from_patches(
        patches: &[Vec<f64>],
        height: usize,
        width: usize,
        patch: usize,
    ) -> Result<Self, CorpusError> {
        check_divisible(height, width, patch)?;
        let gw = width / patch;
        if patches.len() != (height / patch) * gw
            || patches.iter().any(|p| p.len() != 3 * patch * patch)
        {
            return Err(CorpusError::Geometry("patch count or length mismatch".into()));
        }
        let mut data = vec![0.0; height * width * 3];
        for (i, p) in patches.iter().enumerate() {
            let (py, px) = (i / gw, i % gw);
            for y in 0..patch {
                let row = (py * patch + y) * width + px * patch;
                data[row * 3..(row + patch) * 3]
                    .copy_from_slice(&p[y * patch * 3..(y + 1) * patch * 3]);
            }
        }
        Self::new(height, width, data)
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, CorpusError> {
        let bad = |m: &str| CorpusError::Format(format!("PPM: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("expected magic P6"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let body = &bytes[pos + 1..];
        if body.len() != w * h * 3 {
            return Err(bad("pixel payload has the wrong length"));
        }
        Self::new(h, w, body.iter().map(|&b| f64::from(b) / 255.0).collect())
    }
}

fn check_divisible(h: usize, w: usize, patch: usize) -> Result<(), CorpusError> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(CorpusError::Geometry(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageArray {
        let n = h * w * 3;
        ImageArray::new(h, w, (0..n).map(|i| (i % 256) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn desk_geometry() {
        let p = ramp(32, 32).patchify(8).unwrap();
        assert_eq!(p.len(), 16);
        assert!(p.iter().all(|v| v.len() == 192));
    }

    #[test]
    fn paper_geometry() {
        let img = ImageArray::new(224, 224, vec![0.5; 224 * 224 * 3]).unwrap();
        assert_eq!(img.patchify(16).unwrap().len(), 196);
    }

    #[test]
    fn patches_reassemble_bitwise() {
        let img = ramp(16, 24);
        let p = img.patchify(8).unwrap();
        assert_eq!(p[1][0], img.pixel(0, 8)[0]);
        assert_eq!(ImageArray::from_patches(&p, 16, 24, 8).unwrap(), img);
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        assert!(matches!(ramp(30, 32).patchify(8), Err(CorpusError::Geometry(_))));
    }

    #[test]
    fn ppm_round_trip() {
        let img = ramp(8, 4);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n4 8\n255\n"));
        assert_eq!(ImageArray::from_ppm(&bytes).unwrap(), img);
        assert!(ImageArray::from_ppm(b"P3\n1 1\n255\n").is_err());
    }
}
