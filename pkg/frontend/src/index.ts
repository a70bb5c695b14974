export * from "./protocol.js";
export * from "./transport.js";
export * from "./session.js";
export * from "./input.js";
export * from "./renderer.js";
