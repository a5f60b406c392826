//! Blocking HTTP client for a remote provider front end.

use std::collections::BTreeMap;
use std::time::Duration;

use harmcloud_core::provider::{
    CloudApi, CreateServersRequest, Credentials, NetworkListing, OpAck, ProviderError, ScannerApi, ServerListing,
    SessionToken, Timed,
};
use harmcloud_core::vuln::ScanReport;
use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::provider_http::{ServerAction, TOKEN_HEADER};

/// [`CloudApi`] and [`ScannerApi`] over the provider HTTP front end.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base: String,
    http: Client,
}

impl HttpProvider {
    pub fn new(base_url: &str) -> Result<Self, ProviderError> {
        let http = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| ProviderError::EndpointUnreachable(e.to_string()))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            http,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<Timed<T>, ProviderError> {
        let resp = req
            .send()
            .map_err(|e| ProviderError::EndpointUnreachable(e.to_string()))?;
        let ok = resp.status().is_success();
        let bytes = resp
            .bytes()
            .map_err(|e| ProviderError::EndpointUnreachable(e.to_string()))?;
        if ok {
            serde_json::from_slice(&bytes).map_err(|e| ProviderError::ParseError(e.to_string()))
        } else {
            Err(serde_json::from_slice::<ProviderError>(&bytes)
                .unwrap_or_else(|_| ProviderError::ParseError(String::from_utf8_lossy(&bytes).into_owned())))
        }
    }

    fn get<T: DeserializeOwned>(&self, path: &str, token: &str) -> Result<Timed<T>, ProviderError> {
        self.send(self.http.get(self.url(path)).header(TOKEN_HEADER, token))
    }

    fn post<T: DeserializeOwned, B: Serialize>(
        &self,
        path: &str,
        token: Option<&str>,
        body: &B,
    ) -> Result<Timed<T>, ProviderError> {
        let mut req = self.http.post(self.url(path)).json(body);
        if let Some(t) = token {
            req = req.header(TOKEN_HEADER, t);
        }
        self.send(req)
    }
}

impl CloudApi for HttpProvider {
    fn authenticate(&self, creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError> {
        self.post("/identity/auth", None, creds)
    }

    fn list_servers(&self, token: &str) -> Result<Timed<ServerListing>, ProviderError> {
        self.get("/compute/servers", token)
    }

    fn list_networks(&self, token: &str) -> Result<Timed<NetworkListing>, ProviderError> {
        self.get("/network/ports", token)
    }

    fn list_images(&self, token: &str) -> Result<Timed<BTreeMap<String, String>>, ProviderError> {
        self.get("/image/images", token)
    }

    fn rebuild_server(&self, token: &str, vm_id: &str, image_ref: &str) -> Result<Timed<OpAck>, ProviderError> {
        let body = ServerAction::Rebuild {
            image_ref: image_ref.to_string(),
        };
        self.post(&format!("/compute/servers/{vm_id}/action"), Some(token), &body)
    }

    fn create_servers(&self, token: &str, req: &CreateServersRequest) -> Result<Timed<OpAck>, ProviderError> {
        self.post("/compute/servers", Some(token), req)
    }

    fn live_migrate(&self, token: &str, vm_id: &str, target_host_id: &str) -> Result<Timed<OpAck>, ProviderError> {
        let body = ServerAction::MigrateLive {
            host: target_host_id.to_string(),
        };
        self.post(&format!("/compute/servers/{vm_id}/action"), Some(token), &body)
    }
}

impl ScannerApi for HttpProvider {
    fn scanner_authenticate(&self, creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError> {
        self.post("/scanner/session", None, creds)
    }

    fn scanner_vulnerabilities(&self, token: &str) -> Result<Timed<ScanReport>, ProviderError> {
        self.get("/scanner/vulns", token)
    }
}
