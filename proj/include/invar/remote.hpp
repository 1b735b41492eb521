// Minimal HTTP JSON client shared by the remote embedding, oracle, and
// rewriter backends. One POST per call, idempotent retries with exponential
// backoff on transport failures and 5xx responses.
#pragma once

#include <string>

#include "json.hpp"

namespace invar::remote {

// endpoint: "http://host:port/path". Throws RemoteUnavailable after retries
// are exhausted, RemoteProtocolError when the response is not JSON.
nlohmann::json post_json(const std::string& endpoint,
                         const nlohmann::json& body, int retries = 2,
                         int backoff_ms = 100);

}  // namespace invar::remote
