use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::ServiceEntry;
use super::runtime::Environment;
use super::service::Service;

pub type ServiceFactory =
    Arc<dyn Fn(&ServiceEntry, &Arc<Environment>) -> Result<Box<dyn Service>, String> + Send + Sync>;

/// Services a container can load by name.
#[derive(Clone, Default)]
pub struct ServiceLibrary {
    factories: BTreeMap<String, ServiceFactory>,
}

impl std::fmt::Debug for ServiceLibrary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl ServiceLibrary {
    pub fn empty() -> Self {
        Self::default()
    }

    /// directory, reservation, scheduler, executor, storage and http.
    pub fn builtin() -> Self {
        let mut lib = Self::empty();
        lib.register("directory", |entry, env| {
            Ok(Box::new(crate::directory::DirectoryService::from_entry(entry, env)?))
        });
        lib.register("reservation", |entry, env| {
            Ok(Box::new(crate::reservation::ReservationService::from_entry(entry, env)?))
        });
        lib.register("scheduler", |entry, env| {
            Ok(Box::new(crate::execution::SchedulerService::from_entry(entry, env)?))
        });
        lib.register("executor", |entry, env| {
            Ok(Box::new(crate::execution::ExecutorService::from_entry(entry, env)?))
        });
        lib.register("storage", |entry, env| {
            Ok(Box::new(crate::storage::StorageService::from_entry(entry, env)?))
        });
        lib.register("http", |entry, env| Ok(Box::new(crate::ctl::HttpService::from_entry(entry, env)?)));
        lib
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&ServiceEntry, &Arc<Environment>) -> Result<Box<dyn Service>, String> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, entry: &ServiceEntry, env: &Arc<Environment>) -> Result<Box<dyn Service>, String> {
        let factory = self.factories.get(&entry.name).ok_or_else(|| format!("no service named {}", entry.name))?;
        factory(entry, env)
    }
}
