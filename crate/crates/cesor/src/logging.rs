//! Minimal stderr logger controlled by the `CESOR_LOG` environment variable
//! (`error`, `info` or `debug`; default `info`).

use std::sync::OnceLock;

#[derive(Clone, Copy, PartialEq, PartialOrd)]
pub enum Level {
    Error = 0,
    Info = 1,
    Debug = 2,
}

static LEVEL: OnceLock<Level> = OnceLock::new();

pub fn level() -> Level {
    *LEVEL.get_or_init(|| match std::env::var("CESOR_LOG").as_deref() {
        Ok("error") => Level::Error,
        Ok("debug") => Level::Debug,
        _ => Level::Info,
    })
}

macro_rules! log_info {
    ($($arg:tt)*) => {
        if crate::logging::level() >= crate::logging::Level::Info {
            eprintln!("[info] {}", format!($($arg)*));
        }
    };
}

macro_rules! log_debug {
    ($($arg:tt)*) => {
        if crate::logging::level() >= crate::logging::Level::Debug {
            eprintln!("[debug] {}", format!($($arg)*));
        }
    };
}

pub(crate) use {log_debug, log_info};
