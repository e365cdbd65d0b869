/*
    Licensed under the Apache License, Version 2.0 (the "License");
    you may not use this file except in compliance with the License.
    You may obtain a copy of the License at

        https://www.apache.org/licenses/LICENSE-2.0

    Unless required by applicable law or agreed to in writing, software
    distributed under the License is distributed on an "AS IS" BASIS,
    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
    See the License for the specific language governing permissions and
    limitations under the License.
*/

#pragma once

#include "flow/batching.hpp"
#include "flow/codec.hpp"
#include "flow/error.hpp"
#include "flow/hash.hpp"
#include "flow/iteration.hpp"
#include "flow/message.hpp"
#include "flow/planner.hpp"
#include "flow/runtime.hpp"
#include "flow/stream.hpp"
#include "flow/topology.hpp"
#include "flow/window.hpp"
#include "flow/wire.hpp"
