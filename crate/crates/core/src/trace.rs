//! Per-call trace lines named after the OEMCrypto symbol table.
//!
//! Format: `oeccNN <Name> session=<hex|-> status=<OK|Error:kind> in=<hex> out=<hex>`.
//! Payloads longer than 64 bytes are cut to their first 64 bytes and suffixed
//! with `..[len=N]`; empty payloads print as `-`.

use std::fmt;

pub const HEX_PREFIX_BYTES: usize = 64;

/// CDM entry points, numbered as in the OEMCrypto symbol table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Initialize,
    Terminate,
    InstallKeybox,
    GetKeyData,
    IsKeyboxValid,
    GetRandom,
    GetDeviceId,
    WrapKeybox,
    OpenSession,
    CloseSession,
    GenerateDerivedKeys,
    GenerateSignature,
    GenerateNonce,
    LoadKeys,
    RefreshKeys,
    SelectKey,
    RewrapDeviceRsaKey,
    LoadDeviceRsaKey,
    GenerateRsaSignature,
    DeriveKeysFromSessionKey,
    ApiVersion,
    GetSecurityLevel,
    GenericEncrypt,
    GenericDecrypt,
    GenericSign,
    GenericVerify,
    SupportsUsageTable,
    UpdateUsageTable,
    DeactivateUsageEntry,
    ReportUsage,
    DeleteUsageEntry,
    DeleteUsageTable,
    GetMaxNumberOfSessions,
    GetNumberOfOpenSessions,
    QueryKeyControl,
    ForceDeleteUsageEntry,
    DecryptCenc,
}

impl Op {
    pub fn code(self) -> u8 {
        use Op::*;
        match self {
            Initialize => 1,
            Terminate => 2,
            InstallKeybox => 3,
            GetKeyData => 4,
            IsKeyboxValid => 5,
            GetRandom => 6,
            GetDeviceId => 7,
            WrapKeybox => 8,
            OpenSession => 9,
            CloseSession => 10,
            GenerateDerivedKeys => 12,
            GenerateSignature => 13,
            GenerateNonce => 14,
            LoadKeys => 15,
            RefreshKeys => 16,
            SelectKey => 17,
            RewrapDeviceRsaKey => 18,
            LoadDeviceRsaKey => 19,
            GenerateRsaSignature => 20,
            DeriveKeysFromSessionKey => 21,
            ApiVersion => 22,
            GetSecurityLevel => 23,
            GenericEncrypt => 24,
            GenericDecrypt => 25,
            GenericSign => 26,
            GenericVerify => 27,
            SupportsUsageTable => 29,
            UpdateUsageTable => 30,
            DeactivateUsageEntry => 31,
            ReportUsage => 32,
            DeleteUsageEntry => 33,
            DeleteUsageTable => 34,
            GetMaxNumberOfSessions => 37,
            GetNumberOfOpenSessions => 38,
            QueryKeyControl => 41,
            ForceDeleteUsageEntry => 43,
            DecryptCenc => 48,
        }
    }

    pub fn name(self) -> &'static str {
        use Op::*;
        match self {
            Initialize => "Initialize",
            Terminate => "Terminate",
            InstallKeybox => "InstallKeybox",
            GetKeyData => "GetKeyData",
            IsKeyboxValid => "IsKeyboxValid",
            GetRandom => "GetRandom",
            GetDeviceId => "GetDeviceID",
            WrapKeybox => "WrapKeybox",
            OpenSession => "OpenSession",
            CloseSession => "CloseSession",
            GenerateDerivedKeys => "GenerateDerivedKeys",
            GenerateSignature => "GenerateSignature",
            GenerateNonce => "GenerateNonce",
            LoadKeys => "LoadKeys",
            RefreshKeys => "RefreshKeys",
            SelectKey => "SelectKey",
            RewrapDeviceRsaKey => "RewrapDeviceRSAKey",
            LoadDeviceRsaKey => "LoadDeviceRSAKey",
            GenerateRsaSignature => "GenerateRSASignature",
            DeriveKeysFromSessionKey => "DeriveKeysFromSessionKey",
            ApiVersion => "APIVersion",
            GetSecurityLevel => "GetSecurityLevel",
            GenericEncrypt => "Generic_Encrypt",
            GenericDecrypt => "Generic_Decrypt",
            GenericSign => "Generic_Sign",
            GenericVerify => "Generic_Verify",
            SupportsUsageTable => "SupportsUsageTable",
            UpdateUsageTable => "UpdateUsageTable",
            DeactivateUsageEntry => "DeactivateUsageEntry",
            ReportUsage => "ReportUsage",
            DeleteUsageEntry => "DeleteUsageEntry",
            DeleteUsageTable => "DeleteUsageTable",
            GetMaxNumberOfSessions => "GetMaxNumberOfSessions",
            GetNumberOfOpenSessions => "GetNumberofOpenSessions",
            QueryKeyControl => "QueryKeyControl",
            ForceDeleteUsageEntry => "ForceDeleteUsageEntry",
            DecryptCenc => "DecryptCENC",
        }
    }

    /// `oeccNN` symbol.
    pub fn symbol(self) -> String {
        format!("oecc{:02}", self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub op: Op,
    pub session: Option<u32>,
    /// `None` for success, otherwise the error kind.
    pub error: Option<String>,
    pub input: String,
    pub output: String,
}

pub fn hex_prefix(data: &[u8]) -> String {
    if data.is_empty() {
        "-".to_string()
    } else if data.len() <= HEX_PREFIX_BYTES {
        hex::encode(data)
    } else {
        format!("{}..[len={}]", hex::encode(&data[..HEX_PREFIX_BYTES]), data.len())
    }
}

impl TraceRecord {
    pub fn new(op: Op, session: Option<u32>, error: Option<String>, input: &[u8], output: &[u8]) -> Self {
        TraceRecord {
            op,
            session,
            error,
            input: hex_prefix(input),
            output: hex_prefix(output),
        }
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} session=", self.op.symbol(), self.op.name())?;
        match self.session {
            Some(s) => write!(f, "{s:08x}")?,
            None => f.write_str("-")?,
        }
        match &self.error {
            None => f.write_str(" status=OK")?,
            Some(kind) => write!(f, " status=Error:{kind}")?,
        }
        write!(f, " in={} out={}", self.input, self.output)
    }
}

/// A parsed trace line, as read back from a trace file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub symbol: String,
    pub name: String,
    pub session: Option<u32>,
    pub ok: bool,
}

impl TraceLine {
    pub fn parse(line: &str) -> Option<TraceLine> {
        let mut parts = line.split_whitespace();
        let symbol = parts.next()?.to_string();
        let name = parts.next()?.to_string();
        let session = parts.next()?.strip_prefix("session=")?;
        let status = parts.next()?.strip_prefix("status=")?;
        if !symbol.starts_with("oecc") {
            return None;
        }
        Some(TraceLine {
            symbol,
            name,
            session: u32::from_str_radix(session, 16).ok(),
            ok: status == "OK",
        })
    }
}
