//! Authentication and authorization providers.
//!
//! Authentication and authorization are separate calls so a deployment can
//! swap either side. [`Security`] wraps the configured provider and counts
//! authorization checks for audits.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Credentials {
    pub user_id: String,
    /// Opaque to everything but the security provider.
    pub token: String,
}

impl Credentials {
    pub fn new(user_id: impl Into<String>, token: impl Into<String>) -> Self {
        Self { user_id: user_id.into(), token: token.into() }
    }

    pub fn anonymous() -> Self {
        Self::new("anonymous", "")
    }

    /// Parse a `user:token` bearer string.
    pub fn from_bearer(s: &str) -> Option<Self> {
        let (user, token) = s.split_once(':')?;
        Some(Self::new(user, token))
    }

    pub fn to_bearer(&self) -> String {
        format!("{}:{}", self.user_id, self.token)
    }
}

impl fmt::Debug for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credentials").field("user_id", &self.user_id).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Admin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Submit,
    Reserve,
    Query,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub user_id: String,
    pub roles: BTreeSet<Role>,
}

impl Principal {
    pub fn new(user_id: impl Into<String>, roles: impl IntoIterator<Item = Role>) -> Self {
        Self { user_id: user_id.into(), roles: roles.into_iter().collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn allowed(self) -> bool {
        self == Decision::Allow
    }
}

/// Authentication failure. Carries no detail on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("access denied")]
pub struct Denied;

pub trait SecurityProvider: Send + Sync {
    fn name(&self) -> &str;
    fn authenticate(&self, credentials: &Credentials) -> Result<Principal, Denied>;
    fn authorize(&self, principal: &Principal, action: Action, resource: &str) -> Decision;
}

/// Performs no checks at all.
#[derive(Debug, Default, Clone, Copy)]
pub struct AnonymousProvider;

impl SecurityProvider for AnonymousProvider {
    fn name(&self) -> &str {
        "anonymous"
    }

    fn authenticate(&self, credentials: &Credentials) -> Result<Principal, Denied> {
        Ok(Principal::new(credentials.user_id.clone(), [Role::User, Role::Admin]))
    }

    fn authorize(&self, _: &Principal, _: Action, _: &str) -> Decision {
        Decision::Allow
    }
}

/// Token check against a credential file of `user_id:sha256(token)[:roles]`
/// lines. Roles are comma separated (`user`, `admin`); the default is `user`.
#[derive(Debug, Default, Clone)]
pub struct TokenProvider {
    entries: HashMap<String, (String, BTreeSet<Role>)>,
}

pub fn token_hash(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

/// Role matrix shared by every provider that uses roles.
pub fn role_allows(role: Role, action: Action) -> bool {
    match role {
        Role::Admin => true,
        Role::User => matches!(action, Action::Submit | Action::Reserve | Action::Query),
    }
}

impl TokenProvider {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, ':');
            let user = parts.next().unwrap_or_default().trim();
            let hash = parts
                .next()
                .ok_or_else(|| format!("line {}: expected user:token-hash", lineno + 1))?
                .trim()
                .to_ascii_lowercase();
            if user.is_empty() || hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(format!("line {}: malformed entry", lineno + 1));
            }
            let roles = match parts.next() {
                None => BTreeSet::from([Role::User]),
                Some(list) => list
                    .split(',')
                    .map(|r| match r.trim() {
                        "user" => Ok(Role::User),
                        "admin" => Ok(Role::Admin),
                        other => Err(format!("line {}: unknown role {other:?}", lineno + 1)),
                    })
                    .collect::<Result<_, _>>()?,
            };
            entries.insert(user.to_string(), (hash, roles));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn add_user(&mut self, user: &str, token: &str, roles: impl IntoIterator<Item = Role>) {
        self.entries.insert(user.to_string(), (token_hash(token), roles.into_iter().collect()));
    }

    /// Render a credential-file line for `user`.
    pub fn file_line(user: &str, token: &str, roles: &[Role]) -> String {
        let roles: Vec<&str> = roles
            .iter()
            .map(|r| match r {
                Role::User => "user",
                Role::Admin => "admin",
            })
            .collect();
        format!("{user}:{}:{}", token_hash(token), roles.join(","))
    }
}

impl SecurityProvider for TokenProvider {
    fn name(&self) -> &str {
        "token"
    }

    fn authenticate(&self, credentials: &Credentials) -> Result<Principal, Denied> {
        let (hash, roles) = self.entries.get(&credentials.user_id).ok_or(Denied)?;
        if token_hash(&credentials.token) == *hash {
            Ok(Principal { user_id: credentials.user_id.clone(), roles: roles.clone() })
        } else {
            Err(Denied)
        }
    }

    fn authorize(&self, principal: &Principal, action: Action, _resource: &str) -> Decision {
        if principal.roles.iter().any(|r| role_allows(*r, action)) {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }
}

/// The configured provider plus an audit counter of authorization calls.
#[derive(Clone)]
pub struct Security {
    provider: Arc<dyn SecurityProvider>,
    authorize_calls: Arc<AtomicU64>,
}

impl fmt::Debug for Security {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Security")
            .field("provider", &self.provider.name())
            .field("authorize_calls", &self.authorize_calls())
            .finish()
    }
}

impl Security {
    pub fn new(provider: Arc<dyn SecurityProvider>) -> Self {
        Self { provider, authorize_calls: Arc::new(AtomicU64::new(0)) }
    }

    pub fn anonymous() -> Self {
        Self::new(Arc::new(AnonymousProvider))
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn authenticate(&self, credentials: &Credentials) -> Result<Principal, Denied> {
        self.provider.authenticate(credentials)
    }

    pub fn authorize(&self, principal: &Principal, action: Action, resource: &str) -> Decision {
        self.authorize_calls.fetch_add(1, Ordering::Relaxed);
        self.provider.authorize(principal, action, resource)
    }

    /// Authenticate then authorize; any failure collapses to [`Denied`].
    pub fn check(&self, credentials: &Credentials, action: Action, resource: &str) -> Result<Principal, Denied> {
        let principal = self.authenticate(credentials)?;
        if self.authorize(&principal, action, resource).allowed() {
            Ok(principal)
        } else {
            Err(Denied)
        }
    }

    pub fn authorize_calls(&self) -> u64 {
        self.authorize_calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provider() -> TokenProvider {
        let file = format!(
            "# users\n{}\n{}\n",
            TokenProvider::file_line("alice", "s3cret", &[Role::User]),
            TokenProvider::file_line("root", "toor", &[Role::User, Role::Admin]),
        );
        TokenProvider::parse(&file).unwrap()
    }

    #[test]
    fn anonymous_allows_everything() {
        let sec = Security::anonymous();
        let p = sec.authenticate(&Credentials::new("anyone", "garbage")).unwrap();
        for action in [Action::Submit, Action::Reserve, Action::Query, Action::Admin] {
            assert_eq!(sec.authorize(&p, action, "node"), Decision::Allow);
        }
    }

    #[test]
    fn wrong_token_is_denied() {
        let p = provider();
        assert_eq!(p.authenticate(&Credentials::new("alice", "nope")), Err(Denied));
        assert_eq!(p.authenticate(&Credentials::new("mallory", "s3cret")), Err(Denied));
        assert!(p.authenticate(&Credentials::new("alice", "s3cret")).is_ok());
    }

    #[test]
    fn user_without_admin_cannot_shut_down_nodes() {
        let sec = Security::new(Arc::new(provider()));
        let alice = sec.authenticate(&Credentials::new("alice", "s3cret")).unwrap();
        assert_eq!(sec.authorize(&alice, Action::Admin, "node/shutdown"), Decision::Deny);
        assert_eq!(sec.authorize(&alice, Action::Submit, "app"), Decision::Allow);
        let root = sec.authenticate(&Credentials::new("root", "toor")).unwrap();
        assert_eq!(sec.authorize(&root, Action::Admin, "node/shutdown"), Decision::Allow);
        assert_eq!(sec.authorize_calls(), 3);
    }

    #[test]
    fn malformed_credential_files_are_rejected() {
        assert!(TokenProvider::parse("alice").is_err());
        assert!(TokenProvider::parse("alice:xyz").is_err());
        let line = format!("bob:{}:wizard", token_hash("t"));
        assert!(TokenProvider::parse(&line).is_err());
    }

    #[test]
    fn bearer_roundtrip() {
        let c = Credentials::from_bearer("alice:a:b").unwrap();
        assert_eq!(c.user_id, "alice");
        assert_eq!(c.token, "a:b");
        assert_eq!(c.to_bearer(), "alice:a:b");
        assert!(Credentials::from_bearer("nocolon").is_none());
    }

    #[test]
    fn debug_output_hides_token() {
        let dbg = format!("{:?}", Credentials::new("alice", "hunter2"));
        assert!(!dbg.contains("hunter2"));
    }
}
