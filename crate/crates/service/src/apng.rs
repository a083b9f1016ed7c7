use poke2vid::Image;

#[derive(Debug, thiserror::Error)]
pub enum ApngError {
    #[error("an animation needs at least one frame")]
    Empty,
    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

/// Encodes equally sized frames as a looping animated PNG.
pub fn encode_apng(frames: &[Image], fps: f32) -> Result<Vec<u8>, ApngError> {
    let Some(first) = frames.first() else {
        return Err(ApngError::Empty);
    };
    let (h, w) = first.shape();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_animated(frames.len() as u32, 0)?;
        let delay_ms = (1000.0 / fps.max(1e-3)).round().clamp(1.0, u16::MAX as f32) as u16;
        enc.set_frame_delay(delay_ms, 1000)?;
        let mut writer = enc.write_header()?;
        for f in frames {
            writer.write_image_data(f.to_rgb8().as_raw())?;
        }
        writer.finish()?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn animation_carries_every_frame() {
        let frames: Vec<Image> = (0..3).map(|i| Image::filled(4, 6, [i as f32 / 2.0, 0.0, 1.0])).collect();
        let bytes = encode_apng(&frames, 10.0).unwrap();
        let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (6, 4));
        assert_eq!(info.animation_control().unwrap().num_frames, 3);
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        for i in 0..3 {
            reader.next_frame(&mut buf).unwrap();
            assert_eq!(buf[0], (i as f32 / 2.0 * 255.0).round() as u8);
        }
    }
}
