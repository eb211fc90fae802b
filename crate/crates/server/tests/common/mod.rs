#![allow(dead_code)]

use std::net::SocketAddr;

use cipherray_core::paillier::{generate_keys, SecureKey};
use cipherray_core::volume::{encrypt_volume, make_synthetic_volume, PlainVolume};
use cipherray_core::{EncVolume, PublicKey};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use ureq::http::Response;
use ureq::Body;

pub struct TestServer {
    pub addr: SocketAddr,
    pub agent: ureq::Agent,
    _dir: tempfile::TempDir,
}

impl TestServer {
    pub fn start(configure: impl FnOnce(&mut cipherray_server::Config)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut config = cipherray_server::Config::new(dir.path());
        config.workers = 2;
        configure(&mut config);
        let addr = cipherray_server::spawn(config).unwrap();
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        TestServer { addr, agent, _dir: dir }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn upload(&self, bytes: &[u8]) -> (u16, serde_json::Value) {
        let mut r = self.agent.put(&self.url("/volumes")).send(bytes).unwrap();
        (r.status().as_u16(), json(&mut r))
    }

    pub fn render(&self, id: &str, req: &serde_json::Value, asynchronous: bool) -> (u16, Vec<u8>) {
        let path = if asynchronous { "render_async" } else { "render" };
        let r = self
            .agent
            .post(&self.url(&format!("/volumes/{id}/{path}")))
            .header("content-type", "application/json")
            .send(req.to_string())
            .unwrap();
        status_and_bytes(r)
    }

    pub fn get(&self, path: &str) -> (u16, Vec<u8>) {
        status_and_bytes(self.agent.get(&self.url(path)).call().unwrap())
    }

    pub fn delete(&self, path: &str) -> u16 {
        self.agent.delete(&self.url(path)).call().unwrap().status().as_u16()
    }
}

pub fn status_and_bytes(mut r: Response<Body>) -> (u16, Vec<u8>) {
    let status = r.status().as_u16();
    let bytes = r.body_mut().with_config().limit(1 << 32).read_to_vec().unwrap();
    (status, bytes)
}

fn json(r: &mut Response<Body>) -> serde_json::Value {
    serde_json::from_slice(&r.body_mut().read_to_vec().unwrap()).unwrap_or(serde_json::Value::Null)
}

pub fn keys(seed: u64) -> (SecureKey, PublicKey) {
    generate_keys(64, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
}

pub fn volume(pk: &PublicKey, size: usize, dim: usize, gamma: u32) -> (PlainVolume, EncVolume) {
    let plain = PlainVolume::encode(&make_synthetic_volume(size).unwrap(), dim, gamma).unwrap();
    let enc = encrypt_volume(&plain, pk, Default::default(), &mut ChaCha20Rng::seed_from_u64(size as u64)).unwrap();
    (plain, enc)
}
