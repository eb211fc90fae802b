//! Blocking HTTP client for the render server.

use anyhow::{bail, Context};
use cipherray_core::render::RenderRequest;
use cipherray_core::EncImage;
use ureq::http::Response;
use ureq::Body;

const MAX_BODY: u64 = 1 << 36;

pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client {
            base: base.trim_end_matches('/').to_owned(),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// Returns the id assigned to the volume.
    pub fn upload(&self, cvol: &[u8]) -> anyhow::Result<String> {
        let r = self
            .agent
            .put(&self.url("/volumes"))
            .header("content-type", "application/octet-stream")
            .send(cvol)
            .context("upload failed")?;
        let body: serde_json::Value = serde_json::from_slice(&checked(r)?)?;
        body["id"].as_str().map(str::to_owned).context("server returned no id")
    }

    pub fn list(&self) -> anyhow::Result<Vec<serde_json::Value>> {
        let r = self.agent.get(&self.url("/volumes")).call()?;
        Ok(serde_json::from_slice(&checked(r)?)?)
    }

    pub fn volume_dims(&self, id: &str) -> anyhow::Result<[usize; 3]> {
        let record = self
            .list()?
            .into_iter()
            .find(|r| r["id"] == id)
            .with_context(|| format!("unknown volume {id}"))?;
        Ok(serde_json::from_value(record["dims"].clone())?)
    }

    pub fn delete(&self, id: &str) -> anyhow::Result<()> {
        checked(self.agent.delete(&self.url(&format!("/volumes/{id}"))).call()?)?;
        Ok(())
    }

    pub fn render(&self, id: &str, req: &RenderRequest) -> anyhow::Result<EncImage> {
        let r = self
            .agent
            .post(&self.url(&format!("/volumes/{id}/render")))
            .header("content-type", "application/json")
            .send(serde_json::to_string(req)?)
            .context("render request failed")?;
        Ok(EncImage::from_bytes(&checked(r)?)?)
    }
}

fn checked(mut r: Response<Body>) -> anyhow::Result<Vec<u8>> {
    let status = r.status();
    let bytes = r.body_mut().with_config().limit(MAX_BODY).read_to_vec()?;
    if !status.is_success() {
        let msg = serde_json::from_slice::<serde_json::Value>(&bytes)
            .ok()
            .and_then(|v| v["error"].as_str().map(str::to_owned))
            .unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned());
        bail!("server answered {status}: {msg}");
    }
    Ok(bytes)
}
