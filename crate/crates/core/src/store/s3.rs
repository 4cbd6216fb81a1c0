//! S3-compatible object store over path-style HTTP(S).
//!
//! Requests are signed with AWS Signature Version 4 when credentials are
//! configured and sent anonymously otherwise.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use hmac::{Hmac, KeyInit, Mac};
use sha2::{Digest as _, Sha256};
use ureq::Agent;

use super::{ObjectKey, ObjectStore, PutOutcome, StoreError, DEFAULT_BUCKET};

pub const ENV_ENDPOINT: &str = "SILOCOMM_S3_ENDPOINT";
pub const ENV_BUCKET: &str = "SILOCOMM_S3_BUCKET";
pub const ENV_KEY: &str = "SILOCOMM_S3_KEY";
pub const ENV_SECRET: &str = "SILOCOMM_S3_SECRET";

const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

#[derive(Clone, PartialEq, Eq)]
pub struct S3Config {
    /// Base URL, e.g. `http://127.0.0.1:9000`.
    pub endpoint: String,
    pub bucket: String,
    pub access_key: Option<String>,
    pub secret_key: Option<String>,
    pub region: String,
    pub timeout: Duration,
}

impl std::fmt::Debug for S3Config {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("S3Config")
            .field("endpoint", &self.endpoint)
            .field("bucket", &self.bucket)
            .field("access_key", &self.access_key)
            .field("secret_key", &self.secret_key.as_ref().map(|_| "<redacted>"))
            .field("region", &self.region)
            .finish()
    }
}

impl S3Config {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            bucket: DEFAULT_BUCKET.to_owned(),
            access_key: None,
            secret_key: None,
            region: "us-east-1".to_owned(),
            timeout: Duration::from_secs(300),
        }
    }

    /// Reads `SILOCOMM_S3_ENDPOINT` (required), `SILOCOMM_S3_BUCKET`,
    /// `SILOCOMM_S3_KEY` and `SILOCOMM_S3_SECRET`.
    pub fn from_env() -> Result<Self, StoreError> {
        let var = |k| std::env::var(k).ok().filter(|v: &String| !v.is_empty());
        let endpoint = var(ENV_ENDPOINT).ok_or_else(|| StoreError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let mut c = Self::new(endpoint);
        if let Some(b) = var(ENV_BUCKET) {
            c.bucket = b;
        }
        c.access_key = var(ENV_KEY);
        c.secret_key = var(ENV_SECRET);
        if c.access_key.is_some() != c.secret_key.is_some() {
            return Err(StoreError::Config(format!(
                "{ENV_KEY} and {ENV_SECRET} must be set together"
            )));
        }
        Ok(c)
    }
}

#[derive(Debug)]
pub struct S3Store {
    config: S3Config,
    host: String,
    agent: Agent,
}

impl S3Store {
    pub fn new(config: S3Config) -> Result<Self, StoreError> {
        let rest = config
            .endpoint
            .strip_prefix("http://")
            .or_else(|| config.endpoint.strip_prefix("https://"))
            .ok_or_else(|| StoreError::Config(format!("endpoint {:?} is not an http(s) URL", config.endpoint)))?;
        let host = rest.split('/').next().unwrap_or_default().to_owned();
        if host.is_empty() {
            return Err(StoreError::Config("endpoint has no host".into()));
        }
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Ok(Self { config, host, agent })
    }

    pub fn from_env() -> Result<Self, StoreError> {
        Self::new(S3Config::from_env()?)
    }

    fn path(&self, key: &ObjectKey) -> Result<String, StoreError> {
        key.validate()?;
        let base_path = self.config.endpoint.splitn(4, '/').nth(3).unwrap_or("");
        let mut path = String::new();
        if !base_path.is_empty() {
            path.push('/');
            path.push_str(base_path.trim_end_matches('/'));
        }
        path.push('/');
        path.push_str(&uri_encode(&key.bucket));
        for seg in key.key.split('/') {
            path.push('/');
            path.push_str(&uri_encode(seg));
        }
        Ok(path)
    }

    fn request(
        &self,
        method: &str,
        key: &ObjectKey,
        body: Option<&[u8]>,
        extra: &[(&str, &str)],
    ) -> Result<(u16, Vec<u8>), StoreError> {
        let path = self.path(key)?;
        let url = format!("{}{}", scheme_host(&self.config.endpoint), path);
        let payload_hash = if body.is_some() {
            "UNSIGNED-PAYLOAD"
        } else {
            EMPTY_SHA256
        };
        let amz_date = amz_date(SystemTime::now());
        let mut headers: Vec<(String, String)> = vec![
            ("host".into(), self.host.clone()),
            ("x-amz-content-sha256".into(), payload_hash.into()),
            ("x-amz-date".into(), amz_date.clone()),
        ];
        headers.extend(extra.iter().map(|(k, v)| (k.to_ascii_lowercase(), v.to_string())));
        if let (Some(ak), Some(sk)) = (&self.config.access_key, &self.config.secret_key) {
            let auth = SigV4 {
                access_key: ak,
                secret_key: sk,
                region: &self.config.region,
                service: "s3",
            }
            .authorization(method, &path, "", &headers, payload_hash, &amz_date);
            headers.push(("authorization".into(), auth));
        }

        let unreachable = |e: ureq::Error| StoreError::Unreachable(format!("{method} {url}: {e}"));
        let mut resp = match method {
            "PUT" => {
                let mut rb = self.agent.put(&url);
                for (k, v) in headers.iter().filter(|(k, _)| k != "host") {
                    rb = rb.header(k.as_str(), v.as_str());
                }
                rb.send(body.unwrap_or_default())
            }
            "GET" | "HEAD" | "DELETE" => {
                let mut rb = match method {
                    "GET" => self.agent.get(&url),
                    "HEAD" => self.agent.head(&url),
                    _ => self.agent.delete(&url),
                };
                for (k, v) in headers.iter().filter(|(k, _)| k != "host") {
                    rb = rb.header(k.as_str(), v.as_str());
                }
                rb.call()
            }
            _ => unreachable!("unsupported method {method}"),
        }
        .map_err(unreachable)?;
        let status = resp.status().as_u16();
        let data = if method == "HEAD" {
            Vec::new()
        } else {
            resp.body_mut()
                .with_config()
                .limit(u64::MAX)
                .read_to_vec()
                .map_err(unreachable)?
        };
        Ok((status, data))
    }

    fn unexpected(&self, method: &str, key: &ObjectKey, status: u16, body: &[u8]) -> StoreError {
        let detail = String::from_utf8_lossy(&body[..body.len().min(200)]).into_owned();
        // 5xx may clear up; anything else is a configuration problem.
        if status >= 500 {
            StoreError::Unreachable(format!("{method} {key}: HTTP {status} {detail}"))
        } else {
            StoreError::Config(format!("{method} {key}: HTTP {status} {detail}"))
        }
    }
}

fn scheme_host(endpoint: &str) -> &str {
    let after_scheme = endpoint.find("://").map_or(0, |i| i + 3);
    match endpoint[after_scheme..].find('/') {
        Some(i) => &endpoint[..after_scheme + i],
        None => endpoint,
    }
}

impl ObjectStore for S3Store {
    fn kind(&self) -> &'static str {
        "s3"
    }

    fn bucket(&self) -> &str {
        &self.config.bucket
    }

    fn put_if_absent(&self, key: &ObjectKey, blob: Bytes) -> Result<PutOutcome, StoreError> {
        if self.contains(key)? {
            return Ok(PutOutcome::AlreadyPresent);
        }
        let (status, body) = self.request("PUT", key, Some(&blob), &[("if-none-match", "*")])?;
        match status {
            200..=299 => Ok(PutOutcome::Uploaded),
            // Lost a race with another writer.
            412 => Ok(PutOutcome::AlreadyPresent),
            _ => Err(self.unexpected("PUT", key, status, &body)),
        }
    }

    fn get(&self, key: &ObjectKey) -> Result<Bytes, StoreError> {
        let (status, body) = self.request("GET", key, None, &[])?;
        match status {
            200..=299 => Ok(Bytes::from(body)),
            404 => Err(StoreError::NotFound(key.clone())),
            _ => Err(self.unexpected("GET", key, status, &body)),
        }
    }

    fn contains(&self, key: &ObjectKey) -> Result<bool, StoreError> {
        let (status, body) = self.request("HEAD", key, None, &[])?;
        match status {
            200..=299 => Ok(true),
            404 => Ok(false),
            _ => Err(self.unexpected("HEAD", key, status, &body)),
        }
    }

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError> {
        let (status, body) = self.request("DELETE", key, None, &[])?;
        match status {
            200..=299 | 404 => Ok(()),
            _ => Err(self.unexpected("DELETE", key, status, &body)),
        }
    }
}

/// Percent-encodes everything outside the unreserved set.
fn uri_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// `YYYYMMDD'T'HHMMSS'Z'` in UTC.
fn amz_date(t: SystemTime) -> String {
    let secs = t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let (days, rem) = (secs / 86_400, secs % 86_400);
    let (y, m, d) = civil_from_days(days as i64);
    format!(
        "{y:04}{m:02}{d:02}T{:02}{:02}{:02}Z",
        rem / 3600,
        rem / 60 % 60,
        rem % 60
    )
}

// Howard Hinnant's days-to-civil conversion.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (yoe + era * 400 + i64::from(m <= 2), m, d)
}

struct SigV4<'a> {
    access_key: &'a str,
    secret_key: &'a str,
    region: &'a str,
    service: &'a str,
}

fn hmac(key: &[u8], data: &[u8]) -> Vec<u8> {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().to_vec()
}

impl SigV4<'_> {
    fn signing_key(&self, date: &str) -> Vec<u8> {
        let k = hmac(format!("AWS4{}", self.secret_key).as_bytes(), date.as_bytes());
        let k = hmac(&k, self.region.as_bytes());
        let k = hmac(&k, self.service.as_bytes());
        hmac(&k, b"aws4_request")
    }

    fn authorization(
        &self,
        method: &str,
        path: &str,
        query: &str,
        headers: &[(String, String)],
        payload_hash: &str,
        amz_date: &str,
    ) -> String {
        let mut hs: Vec<(String, String)> = headers
            .iter()
            .map(|(k, v)| (k.to_ascii_lowercase(), v.trim().to_owned()))
            .collect();
        hs.sort();
        let canonical_headers: String = hs.iter().map(|(k, v)| format!("{k}:{v}\n")).collect();
        let signed: Vec<&str> = hs.iter().map(|(k, _)| k.as_str()).collect();
        let signed = signed.join(";");
        let canonical_request = format!("{method}\n{path}\n{query}\n{canonical_headers}\n{signed}\n{payload_hash}");
        let date = &amz_date[..8];
        let scope = format!("{date}/{}/{}/aws4_request", self.region, self.service);
        let string_to_sign = format!(
            "AWS4-HMAC-SHA256\n{amz_date}\n{scope}\n{}",
            hex::encode(Sha256::digest(canonical_request.as_bytes()))
        );
        let signature = hex::encode(hmac(&self.signing_key(date), string_to_sign.as_bytes()));
        format!(
            "AWS4-HMAC-SHA256 Credential={}/{scope}, SignedHeaders={signed}, Signature={signature}",
            self.access_key
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SECRET: &str = "wJalrXUtnFEMI/K7MDENG+bPxRfiCYEXAMPLEKEY";

    #[test]
    fn signing_key_matches_published_example() {
        let s = SigV4 {
            access_key: "AKIDEXAMPLE",
            secret_key: SECRET,
            region: "us-east-1",
            service: "iam",
        };
        assert_eq!(
            hex::encode(s.signing_key("20150830")),
            "c4afb1cc5771d871763a393e44b703571b55cc28424d1a5e86da6ed3c154a4b9"
        );
    }

    #[test]
    fn vanilla_get_signature() {
        let s = SigV4 {
            access_key: "AKIDEXAMPLE",
            secret_key: SECRET,
            region: "us-east-1",
            service: "service",
        };
        let headers = [
            ("Host".to_owned(), "example.amazonaws.com".to_owned()),
            ("X-Amz-Date".to_owned(), "20150830T123600Z".to_owned()),
        ];
        let auth = s.authorization("GET", "/", "", &headers, EMPTY_SHA256, "20150830T123600Z");
        assert_eq!(
            auth,
            "AWS4-HMAC-SHA256 Credential=AKIDEXAMPLE/20150830/us-east-1/service/aws4_request, \
             SignedHeaders=host;x-amz-date, \
             Signature=5fa00fa31553b73ebf1942676e86291e8372ff2a2260956d9b8aae1d763fbf31"
        );
    }

    #[test]
    fn dates_format_in_utc() {
        let t = UNIX_EPOCH + Duration::from_secs(1_440_938_160);
        assert_eq!(amz_date(t), "20150830T123600Z");
        assert_eq!(amz_date(UNIX_EPOCH), "19700101T000000Z");
        let leap = UNIX_EPOCH + Duration::from_secs(951_782_400);
        assert_eq!(amz_date(leap), "20000229T000000Z");
    }

    #[test]
    fn paths_are_path_style() {
        let s = S3Store::new(S3Config::new("http://127.0.0.1:9000/base/")).unwrap();
        let k = ObjectKey::new("silocomm", "round-1/ab");
        assert_eq!(s.path(&k).unwrap(), "/base/silocomm/round-1/ab");
        assert_eq!(scheme_host("http://127.0.0.1:9000/base"), "http://127.0.0.1:9000");
        assert_eq!(s.host, "127.0.0.1:9000");
        assert!(S3Store::new(S3Config::new("ftp://x")).is_err());
        assert_eq!(uri_encode("a b~"), "a%20b~");
    }
}
