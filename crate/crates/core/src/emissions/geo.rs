use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("geolocation disabled")]
    Disabled,
    #[error("geolocation request failed: {0}")]
    Request(String),
}

/// Finds the ISO-Alpha-2 country of the machine running the session.
pub trait GeoResolver: Send + Sync {
    fn locate(&self) -> Result<String, GeoError>;
}

/// Offline resolver: always defers to the fallback coefficient.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoGeo;

impl GeoResolver for NoGeo {
    fn locate(&self) -> Result<String, GeoError> {
        Err(GeoError::Disabled)
    }
}

/// Fixed answer, for tests and pinned deployments.
#[derive(Debug, Clone)]
pub struct StaticGeo(Result<String, GeoError>);

impl StaticGeo {
    pub fn new(code: impl Into<String>) -> Self {
        StaticGeo(Ok(code.into()))
    }

    pub fn failing() -> Self {
        StaticGeo(Err(GeoError::Request("timed out".into())))
    }
}

impl GeoResolver for StaticGeo {
    fn locate(&self) -> Result<String, GeoError> {
        self.0.clone()
    }
}

/// Looks the public IP up against a plain-text country endpoint.
#[cfg(feature = "geoip")]
#[derive(Debug, Clone)]
pub struct HttpGeoResolver {
    url: String,
    timeout: std::time::Duration,
}

#[cfg(feature = "geoip")]
impl HttpGeoResolver {
    pub const DEFAULT_URL: &'static str = "https://ipinfo.io/country";

    pub fn new(url: impl Into<String>, timeout: std::time::Duration) -> Self {
        HttpGeoResolver {
            url: url.into(),
            timeout,
        }
    }
}

#[cfg(feature = "geoip")]
impl Default for HttpGeoResolver {
    fn default() -> Self {
        Self::new(Self::DEFAULT_URL, std::time::Duration::from_secs(3))
    }
}

#[cfg(feature = "geoip")]
impl GeoResolver for HttpGeoResolver {
    fn locate(&self) -> Result<String, GeoError> {
        let body = ureq::get(&self.url)
            .timeout(self.timeout)
            .call()
            .map_err(|e| GeoError::Request(e.to_string()))?
            .into_string()
            .map_err(|e| GeoError::Request(e.to_string()))?;
        Ok(body.trim().to_string())
    }
}
