//! PNG contact sheets: fixed-separator grids of images, the file-based
//! analog of side-by-side figure panels.

use crate::data::Image;
use crate::error::{Error, Result};
use std::path::Path;

const SEPARATOR_PX: usize = 2;
const SEPARATOR_VALUE: u8 = 255;

/// Assemble rows of equally sized images into one grayscale sheet with
/// 2-pixel separators.
pub fn contact_sheet(rows: &[Vec<Image>]) -> Result<image::GrayImage> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(Error::Input("contact sheet needs at least one image".into()));
    }
    let cols = rows[0].len();
    let side = rows[0][0].side();
    for row in rows {
        if row.len() != cols {
            return Err(Error::Shape("contact sheet rows must have equal lengths".into()));
        }
        for img in row {
            if img.side() != side {
                return Err(Error::Shape("contact sheet images must share one size".into()));
            }
        }
    }
    let width = cols * side + (cols - 1) * SEPARATOR_PX;
    let height = rows.len() * side + (rows.len() - 1) * SEPARATOR_PX;
    let mut sheet = image::GrayImage::from_pixel(
        width as u32,
        height as u32,
        image::Luma([SEPARATOR_VALUE]),
    );
    for (ri, row) in rows.iter().enumerate() {
        let y0 = ri * (side + SEPARATOR_PX);
        for (ci, img) in row.iter().enumerate() {
            let x0 = ci * (side + SEPARATOR_PX);
            let bytes = img.to_u8();
            for i in 0..side {
                for j in 0..side {
                    sheet.put_pixel(
                        (x0 + j) as u32,
                        (y0 + i) as u32,
                        image::Luma([bytes[i * side + j]]),
                    );
                }
            }
        }
    }
    Ok(sheet)
}

pub fn save_contact_sheet(path: &Path, rows: &[Vec<Image>]) -> Result<()> {
    contact_sheet(rows)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn sheet_dimensions_include_separators() {
        let img = Image::new(Array2::zeros((8, 8))).unwrap();
        let sheet = contact_sheet(&[vec![img.clone(), img.clone()], vec![img.clone(), img]])
            .unwrap();
        assert_eq!(sheet.dimensions(), (18, 18));
        // separator column is white
        assert_eq!(sheet.get_pixel(8, 0).0[0], 255);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let img = Image::new(Array2::zeros((8, 8))).unwrap();
        assert!(contact_sheet(&[vec![img.clone(), img.clone()], vec![img]]).is_err());
    }
}
