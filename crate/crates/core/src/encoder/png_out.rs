use std::io::Write;

use super::FlowImage;

/// Writes the normalized channels as an 8-bit RGB PNG (R = sell, G = buy,
/// B = book). Compression settings are pinned so output bytes are stable.
pub fn write_png(image: &FlowImage, out: impl Write) -> Result<(), png::EncodingError> {
    let mut encoder = png::Encoder::new(out, image.n as u32, image.m as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_compression(png::Compression::Balanced);
    encoder.set_filter(png::Filter::Sub);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&image.rgb_bytes())?;
    writer.finish()
}
