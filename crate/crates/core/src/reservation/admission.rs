use serde::{Deserialize, Serialize};

use super::book::TimeWindow;
use crate::ids::{AppId, ReservationId};

/// One reserved window as seen by the node it reserves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAllocation {
    pub window: TimeWindow,
    pub reservation_id: ReservationId,
    pub bound_app: Option<AppId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "lowercase")]
pub enum RefuseReason {
    Reserved { reservation_id: ReservationId },
    Unauthenticated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum Admission {
    Admit,
    Refuse(RefuseReason),
}

impl Admission {
    pub fn is_admit(&self) -> bool {
        matches!(self, Admission::Admit)
    }
}

/// A node's local copy of its own reserved windows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocationManager {
    windows: Vec<NodeAllocation>,
}

impl AllocationManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replace the copy with a pushed update.
    pub fn sync(&mut self, mut windows: Vec<NodeAllocation>) {
        windows.sort_by_key(|w| w.window.start);
        self.windows = windows;
    }

    pub fn windows(&self) -> &[NodeAllocation] {
        &self.windows
    }

    pub fn active_at(&self, now: i64) -> Option<&NodeAllocation> {
        self.windows.iter().find(|w| w.window.contains(now))
    }

    /// Inside a window only the bound application runs; outside any
    /// window every authenticated job does.
    pub fn admissible(&self, app: AppId, authenticated: bool, now: i64) -> Admission {
        match self.active_at(now) {
            Some(w) if w.bound_app == Some(app) => Admission::Admit,
            Some(w) => Admission::Refuse(RefuseReason::Reserved { reservation_id: w.reservation_id }),
            None if authenticated => Admission::Admit,
            None => Admission::Refuse(RefuseReason::Unauthenticated),
        }
    }

    /// Dispatch-side check: a job of `app` may start at `now` unless a window
    /// it is not bound to is running or opens within `lead_s`.
    pub fn dispatch_allowed(&self, app: AppId, now: i64, lead_s: i64) -> bool {
        !self
            .windows
            .iter()
            .any(|w| w.bound_app != Some(app) && w.window.start - lead_s <= now && now < w.window.end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manager(bound: Option<AppId>) -> (AllocationManager, ReservationId) {
        let id = ReservationId::new();
        let mut m = AllocationManager::new();
        m.sync(vec![NodeAllocation { window: TimeWindow { start: 100, end: 200 }, reservation_id: id, bound_app: bound }]);
        (m, id)
    }

    #[test]
    fn bound_app_admitted_inside_window() {
        let app = AppId::new();
        let (m, _) = manager(Some(app));
        assert_eq!(m.admissible(app, true, 150), Admission::Admit);
    }

    #[test]
    fn unbound_app_refused_inside_window() {
        let (m, id) = manager(Some(AppId::new()));
        assert_eq!(
            m.admissible(AppId::new(), true, 100),
            Admission::Refuse(RefuseReason::Reserved { reservation_id: id })
        );
    }

    #[test]
    fn outside_windows_security_decides() {
        let (m, _) = manager(None);
        assert!(m.admissible(AppId::new(), true, 200).is_admit());
        assert_eq!(m.admissible(AppId::new(), false, 50), Admission::Refuse(RefuseReason::Unauthenticated));
    }

    #[test]
    fn lead_time_blocks_non_owners_early() {
        let owner = AppId::new();
        let (m, _) = manager(Some(owner));
        assert!(m.dispatch_allowed(AppId::new(), 69, 30));
        assert!(!m.dispatch_allowed(AppId::new(), 70, 30));
        assert!(m.dispatch_allowed(owner, 70, 30));
        assert!(m.dispatch_allowed(AppId::new(), 200, 30));
    }
}
