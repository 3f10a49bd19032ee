//! Minimal example of an external enhancer command for the texture
//! refinement hook: scales image brightness by a factor.
//!
//! Usage: demo-enhancer <in.png> <out.png> [factor]
//!
//! Wire it up as `hook = "command:demo-enhancer {in} {out} 0.9"`.

use std::process::ExitCode;
use zmono_core::raster::ColorImage;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: demo-enhancer <in.png> <out.png> [factor]");
        return ExitCode::from(2);
    }
    let factor: f32 = match args.get(3).map(|f| f.parse()) {
        None => 1.0,
        Some(Ok(f)) => f,
        Some(Err(_)) => {
            eprintln!("factor must be a number");
            return ExitCode::from(2);
        }
    };
    let mut img = match ColorImage::load_png(&args[1]) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    for px in &mut img.data {
        for c in px.iter_mut() {
            *c = (*c * factor).clamp(0.0, 1.0);
        }
    }
    if let Err(e) = img.save_png(&args[2]) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
