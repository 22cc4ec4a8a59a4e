use std::sync::Mutex;

use chrono::{DateTime, Duration, TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct FixedClock(Mutex<DateTime<Utc>>);

impl FixedClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        FixedClock(Mutex::new(at))
    }

    pub fn at_unix(seconds: i64) -> Self {
        Self::new(Utc.timestamp_opt(seconds, 0).single().unwrap_or_default())
    }

    pub fn set(&self, at: DateTime<Utc>) {
        *self.0.lock().unwrap() = at;
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

/// Daily service window `[start_minute, end_minute)` in local time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingHours {
    pub start_minute: u32,
    pub end_minute: u32,
    /// IANA zone name, e.g. `Asia/Shanghai`.
    pub timezone: String,
}

impl Default for WorkingHours {
    /// Always open.
    fn default() -> Self {
        WorkingHours {
            start_minute: 0,
            end_minute: 1440,
            timezone: "UTC".into(),
        }
    }
}

impl WorkingHours {
    pub fn new(start_minute: u32, end_minute: u32, timezone: &str) -> Result<Self> {
        let wh = WorkingHours {
            start_minute,
            end_minute,
            timezone: timezone.to_owned(),
        };
        wh.validate()?;
        Ok(wh)
    }

    pub fn zone(&self) -> Result<Tz> {
        self.timezone
            .parse::<Tz>()
            .map_err(|_| Error::Config(format!("unknown time zone {:?}", self.timezone)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_minute < self.end_minute && self.end_minute <= 1440) {
            return Err(Error::Config(format!(
                "working hours need 0 <= start < end <= 1440, got {}..{}",
                self.start_minute, self.end_minute
            )));
        }
        self.zone().map(|_| ())
    }

    /// Minutes since local midnight at `now`.
    pub fn local_minute(&self, now: DateTime<Utc>) -> Result<u32> {
        use chrono::Timelike;
        let local = now.with_timezone(&self.zone()?);
        Ok(local.hour() * 60 + local.minute())
    }

    pub fn allows(&self, now: DateTime<Utc>) -> Result<bool> {
        self.validate()?;
        let m = self.local_minute(now)?;
        Ok(self.start_minute <= m && m < self.end_minute)
    }
}
